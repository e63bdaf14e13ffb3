"""HTTP API tests: endpoints, error parity, per-session serialization."""

from __future__ import annotations

import threading
import time

import pytest
from fastapi.testclient import TestClient

from conftest import FIXTURES, StaticBackend, fixed_clock
from helmsman.config import EngineConfig, build_engine
from helmsman.doc_corpus import DocumentCache, load_corpus
from helmsman.errors import InvalidManifest
from helmsman.executor import ExecutionLog, Item, ItemKind, Workspace, WorkspaceManager
from helmsman.plugin_registry import load_plugins_dir
from helmsman.qa_engine import AugmentationStore
from helmsman.service import create_app, manifest_from_body, ManifestBody
from helmsman.session import EngineSettings, SessionEngine, SessionStore
from helmsman.config import PACKAGED_DATA
from helmsman.taxonomy import load_taxonomy


@pytest.fixture()
def client(tmp_path):
    config = EngineConfig(data_dir=tmp_path / "data")
    engine = build_engine(config)
    return TestClient(create_app(engine))


def create_session(client, language="en") -> str:
    response = client.post("/sessions", json={"language": language})
    assert response.status_code == 201
    return response.json()["session_id"]


class TestSessions:
    def test_create_session(self, client):
        response = client.post("/sessions", json={"language": "en"})
        assert response.status_code == 201
        body = response.json()
        assert body["session_id"].startswith("sess-")
        assert body["session"]["phase"] == "idle"

    def test_create_session_bad_language(self, client):
        response = client.post("/sessions", json={"language": "xx"})
        assert response.status_code == 404

    def test_get_unknown_session(self, client):
        response = client.get("/sessions/sess-nope")
        assert response.status_code == 404
        assert response.json()["code"] == "not_found"

    def test_full_flow_over_http(self, client):
        sid = create_session(client)
        r = client.post(
            f"/sessions/{sid}/message",
            json={"text": "how do I route a differential pair"},
        )
        assert r.status_code == 200
        body = r.json()
        assert body["session"]["phase"] == "routing_main"
        candidates = body["effects"][0]["candidates"]
        assert candidates[0]["id"] == "track-routing"

        r = client.post(
            f"/sessions/{sid}/message",
            json={"event": "confirm_main", "main_id": "track-routing"},
        )
        assert r.json()["session"]["phase"] == "routing_sub"

        r = client.post(f"/sessions/{sid}/message", json={"event": "confirm_sub"})
        body = r.json()
        assert body["session"]["phase"] == "viewing_doc"
        doc_url = body["session"]["doc_url"]
        assert doc_url

        doc = client.get(doc_url)
        assert doc.status_code == 200
        assert "text/html" in doc.headers["content-type"]
        assert "frag-diff-pairs" in doc.text

        r = client.post(
            f"/sessions/{sid}/message", json={"text": "what gap should the pair keep"}
        )
        body = r.json()
        assert body["session"]["phase"] == "qa"
        assert body["effects"][0]["grounded"] is True

        r = client.post(
            f"/sessions/{sid}/message", json={"text": "/do round my track corners"}
        )
        body = r.json()
        assert body["session"]["phase"] == "recommending"
        assert body["effects"][0]["ranked"][0]["plugin_id"] == "round-tracker"

        r = client.post(
            f"/sessions/{sid}/message",
            json={"event": "confirm_plugin", "plugin_id": "round-tracker"},
        )
        body = r.json()
        assert body["session"]["phase"] == "eliciting"
        assert body["session"]["elicitation"]["plugin_id"] == "round-tracker"

        r = client.post(
            f"/sessions/{sid}/execute", json={"args": {"radius-mil": "15"}}
        )
        body = r.json()
        assert body["effects"][0]["outcome"] == "ok"
        assert body["session"]["workspace_version"] == 1
        assert body["session"]["phase"] == "qa"

        ws = client.get(f"/workspace/{sid}")
        assert ws.status_code == 200
        assert ws.json()["version"] == 1
        assert "corner_style = rounded" in ws.json()["serialized"]

        exec_id = body["effects"][0]["exec_id"]
        record = client.get(f"/executions/{exec_id}")
        assert record.status_code == 200
        assert record.json()["execution"]["outcome"] == "ok"

    def test_illegal_event_is_409(self, client):
        sid = create_session(client)
        r = client.post(
            f"/sessions/{sid}/message",
            json={"event": "confirm_sub", "subtask_id": "diff-pairs"},
        )
        assert r.status_code == 409
        assert r.json()["code"] == "illegal_transition"


class TestDocs:
    def test_unknown_doc_is_404_with_code(self, client):
        response = client.get("/docs/doc-ffffffffffffffff")
        assert response.status_code == 404
        assert response.json()["code"] == "doc_not_found"

    def test_doc_asset_served(self, client):
        # the install-plugins fragment embeds the toolbar image; the demo
        # script has no matching rule, so lexical fallback routes there
        sid = create_session(client)
        r = client.post(
            f"/sessions/{sid}/message",
            json={"text": "install action plugins with the content manager"},
        )
        assert r.json()["effects"][0]["candidates"][0]["id"] == "plugin-scripting"
        client.post(
            f"/sessions/{sid}/message",
            json={"event": "confirm_main", "main_id": "plugin-scripting"},
        )
        r = client.post(
            f"/sessions/{sid}/message",
            json={"event": "confirm_sub", "subtask_id": "install-plugins"},
        )
        doc_url = r.json()["session"]["doc_url"]
        html = client.get(doc_url).text
        import re

        match = re.search(r'src="assets/([0-9a-f]{12}\.png)"', html)
        assert match
        asset = client.get(f"{doc_url}/assets/{match.group(1)}")
        assert asset.status_code == 200
        assert asset.headers["content-type"].startswith("image/png")
        missing = client.get(f"{doc_url}/assets/0000000000ff.png")
        assert missing.status_code == 404


class TestPlugins:
    VALID = {
        "plugin_id": "via-fence",
        "display_name": "Via Fence",
        "description": "places a fence of stitching vias along a track",
        "parameters": [
            {"name": "pitch-mil", "kind": "integer", "required": True},
        ],
        "input_examples": [{"values": {"pitch-mil": "40"}, "caption": "dense fence"}],
        "binding": {"kind": "builtin_sim"},
        "idempotent": True,
    }

    def test_listing_sorted(self, client):
        rows = client.get("/plugins").json()["plugins"]
        ids = [r["plugin_id"] for r in rows]
        assert ids == sorted(ids)
        assert "round-tracker" in ids

    def test_register_user_plugin(self, client):
        before = len(client.get("/plugins").json()["plugins"])
        response = client.post("/plugins", json=self.VALID)
        assert response.status_code == 201
        after = client.get("/plugins").json()["plugins"]
        assert len(after) == before + 1

    def test_invalid_manifest_422_matches_engine_errors(self, client):
        bad = dict(self.VALID)
        bad["plugin_id"] = "via-fence-bad"
        bad["input_examples"] = [{"values": {"pitch-mil": "abc"}, "caption": "broken"}]
        response = client.post("/plugins", json=bad)
        assert response.status_code == 422
        api_errors = response.json()["details"]["errors"]

        body = ManifestBody(**bad)
        manifest = manifest_from_body(body)
        with pytest.raises(InvalidManifest) as err:
            from helmsman.plugin_registry import Registry

            Registry().register(manifest)
        assert api_errors == err.value.details["errors"]

    def test_bundled_plugin_cannot_be_replaced(self, client):
        clash = dict(self.VALID)
        clash["plugin_id"] = "round-tracker"
        response = client.post("/plugins", json=clash)
        assert response.status_code == 409
        assert response.json()["code"] == "duplicate_bundled"


class _BlockingBackend:
    """Backend that parks the first caller until released."""

    def __init__(self) -> None:
        self.release = threading.Event()
        self.entered = threading.Event()

    def complete(self, request) -> str:
        self.entered.set()
        self.release.wait(timeout=5)
        return "track-routing"


class TestConcurrency:
    def test_second_concurrent_request_gets_409(self, tmp_path):
        backend = _BlockingBackend()
        engine = SessionEngine(
            taxonomy=load_taxonomy(PACKAGED_DATA / "taxonomy.txt"),
            doc_cache=DocumentCache(load_corpus(PACKAGED_DATA / "corpus")),
            registry=load_plugins_dir(PACKAGED_DATA / "plugins"),
            backend=backend,
            augmentation_store=AugmentationStore(tmp_path / "aug.jsonl"),
            workspaces=WorkspaceManager(tmp_path / "ws"),
            execution_log=ExecutionLog(tmp_path / "exec.jsonl"),
            session_store=SessionStore(tmp_path / "sessions"),
            clock=fixed_clock,
        )
        client = TestClient(create_app(engine))
        sid = create_session(client)

        results = {}

        def slow_call():
            results["first"] = client.post(
                f"/sessions/{sid}/message", json={"text": "route something"}
            )

        thread = threading.Thread(target=slow_call)
        thread.start()
        assert backend.entered.wait(timeout=5)
        second = client.post(f"/sessions/{sid}/message", json={"text": "again"})
        backend.release.set()
        thread.join(timeout=5)

        assert second.status_code == 409
        assert second.json()["code"] == "session_busy"
        assert results["first"].status_code == 200
