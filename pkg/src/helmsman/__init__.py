"""Helmsman: AI-assistant orchestration engine.

Routes natural-language requests through a two-level task taxonomy,
assembles tailored documentation from per-subtask fragments, answers
grounded questions over that documentation, and recommends and executes
registered plugins against a versioned simulated workspace.
"""

__version__ = "0.1.0"
