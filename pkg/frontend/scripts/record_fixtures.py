"""Regenerate tests/fixtures/recorded.json from the live backend.

Spins up the real HTTP app in-process with the offline provider, performs
the scripted exchanges the UI tests replay, and captures verbatim response
bodies (including raw SSE text and the persisted assistant turns). Run from
the frontend directory:

    python3 scripts/record_fixtures.py
"""
from __future__ import annotations

import json
import tempfile
from datetime import date
from pathlib import Path

from fastapi.testclient import TestClient

from finrag.config import PipelineSettings, ProviderSettings, ServiceConfig, build_runtime
from finrag.service import create_app

HERE = Path(__file__).resolve().parent
OUT = HERE.parent / "tests" / "fixtures" / "recorded.json"
ACME = HERE.parent.parent / "sample_data" / "filings" / "acme-corp-2023-annual.md"

ANSWERABLE = "What was ACME Corp headline revenue in fiscal 2023?"
UNANSWERABLE = "What was ACME Corp employee headcount in fiscal 2019?"


def snap(resp) -> dict:
    return {"status": resp.status_code, "json": resp.json()}


def main() -> None:
    acme_markdown = ACME.read_text(encoding="utf-8")
    with tempfile.TemporaryDirectory() as tmp:
        config = ServiceConfig(
            store_path=f"{tmp}/store",
            provider=ProviderSettings(kind="offline", embedding_dim=64),
            pipeline=PipelineSettings(),
        )
        runtime = build_runtime(config, today=lambda: date(2024, 6, 30))
        client = TestClient(create_app(runtime))

        fixtures: dict = {"acme_markdown": acme_markdown}

        fixtures["health_empty"] = snap(client.get("/health"))
        fixtures["filters_empty"] = snap(client.get("/filters"))
        fixtures["companies_empty"] = snap(client.get("/companies"))
        fixtures["documents_empty"] = snap(client.get("/documents"))

        def upload(name: str, text: str) -> dict:
            return snap(
                client.post(
                    "/documents",
                    files={"file": (name, text.encode("utf-8"), "text/markdown")},
                    data={"collection": "filings"},
                )
            )

        fixtures["upload_acme"] = upload("acme-corp-2023-annual.md", acme_markdown)
        fixtures["upload_acme_again"] = upload("acme-corp-2023-annual.md", acme_markdown)
        fixtures["upload_whitespace"] = upload("blank.md", "   \n\n  \n")

        fixtures["filters_after_upload"] = snap(client.get("/filters"))
        fixtures["companies_after_upload"] = snap(client.get("/companies"))
        fixtures["documents_after_upload"] = snap(client.get("/documents"))

        def converse(question: str) -> dict:
            created = client.post("/conversations", json={"title": "Fixture session"})
            cid = created.json()["conversation_id"]
            resp = client.post(f"/conversations/{cid}/messages", json={"text": question})
            assert resp.status_code == 200, resp.text
            persisted = runtime.conversations.turns(cid)[-1]
            assert persisted.role == "assistant"
            return {
                "create": snap(created),
                "request_text": question,
                "status": resp.status_code,
                "content_type": resp.headers["content-type"],
                "sse": resp.text,
                "persisted_text": persisted.text,
            }

        fixtures["message_answer"] = converse(ANSWERABLE)
        fixtures["message_no_answer"] = converse(UNANSWERABLE)

        runtime.close()

    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(fixtures, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({OUT.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
