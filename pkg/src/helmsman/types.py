"""Shared primitive types: languages, slugs, timestamps."""

from __future__ import annotations

import re
from datetime import datetime, timezone
from enum import Enum

SLUG_RE = re.compile(r"^[a-z0-9-]{1,64}$")
# Parameter names additionally allow underscores (arg maps carry keys such
# as width_mil).
PARAM_NAME_RE = re.compile(r"^[a-z0-9_-]{1,64}$")


class Language(str, Enum):
    EN = "en"
    ZH = "zh"


def is_slug(value: str) -> bool:
    return bool(SLUG_RE.match(value))


def utc_now_rfc3339() -> str:
    """Current UTC time as an RFC 3339 string with second precision."""
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
