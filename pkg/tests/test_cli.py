from __future__ import annotations

import contextlib
import io
import json
from pathlib import Path
from types import SimpleNamespace

import pytest

from conftest import SENSITIVE_CATEGORY
from privrec.cli import main
from stubs import StubServer, chat_stub, numbered
from test_pipeline import PLAIN_TITLES, SENSITIVE_TITLES


def invoke(*argv: str) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def metadata_rows():
    rows = []
    for i, title in enumerate(SENSITIVE_TITLES):
        rows.append(
            {
                "parent_asin": f"s{i:02d}",
                "title": title,
                "main_category": SENSITIVE_CATEGORY,
                "features": ["discreet packaging"],
                "description": [f"{title} for daily use"],
            }
        )
    for i, title in enumerate(PLAIN_TITLES):
        rows.append(
            {
                "parent_asin": f"n{i:02d}",
                "title": title,
                "main_category": "Home & Kitchen" if i < 5 else "Sports & Outdoors",
                "features": ["sturdy build"],
                "description": [f"{title} for the whole family"],
            }
        )
    return rows


USER_SEQUENCES = {
    # 8-item windows end up holding 2, 2 and 1 sensitive items; every
    # target is a plain product so mock replies can hit it
    "u001": ["s00", "s01", "n00", "n01", "n02", "n03", "s02",
             "n04", "n05", "n06", "s03", "n07", "n08", "n09"],
    "u002": ["n09", "n08", "s04", "n07", "n06", "n05", "s05",
             "n04", "n03", "n02", "s00", "n01", "n00"],
    "u003": ["s00", "s01", "s02", "s03", "n00", "n01", "n02",
             "n03", "n04", "n05", "n06", "n07"],
}


def write_corpus(root: Path) -> SimpleNamespace:
    metadata = root / "metadata.jsonl"
    metadata.write_text(
        "".join(json.dumps(r) + "\n" for r in metadata_rows()), encoding="utf-8"
    )
    interactions = root / "interactions.jsonl"
    lines = []
    for user, items in USER_SEQUENCES.items():
        for t, item in enumerate(items):
            lines.append(json.dumps({"user_id": user, "item_id": item, "timestamp": t}))
    interactions.write_text("\n".join(lines) + "\n", encoding="utf-8")

    labels = root / "labels.jsonl"
    labels.write_text(
        "".join(
            json.dumps(
                {"product_id": r["parent_asin"],
                 "label": "sensitive" if r["parent_asin"].startswith("s") else "nonsensitive"}
            ) + "\n"
            for r in metadata_rows()
        ),
        encoding="utf-8",
    )
    scores = root / "scores.jsonl"
    scores.write_text(
        "".join(
            json.dumps(
                {"product_id": f"s{i:02d}", "score": 0.6 + 0.05 * i}
            ) + "\n"
            for i in range(len(SENSITIVE_TITLES))
        )
        + "".join(
            json.dumps({"product_id": f"n{i:02d}", "score": 0.05}) + "\n"
            for i in range(len(PLAIN_TITLES))
        ),
        encoding="utf-8",
    )
    return SimpleNamespace(
        metadata=metadata, interactions=interactions, labels=labels, scores=scores
    )


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    """Full pipeline executed once through the CLI; tests inspect it."""
    root = tmp_path_factory.mktemp("flow")
    raw = write_corpus(root)
    archive = root / "archive.json.gz"
    model = root / "model.bin"
    verdicts = root / "verdicts.jsonl"
    index = root / "index.bin"
    runs_root = root / "runs"
    report_dir = root / "report"

    steps: dict[str, tuple[int, str, str]] = {}

    def step(name, *argv):
        steps[name] = invoke(*argv)
        code, out, err = steps[name]
        assert code == 0, f"{name} exited {code}: {out}{err}"

    step(
        "ingest",
        "ingest",
        "--metadata", str(raw.metadata),
        "--interactions", str(raw.interactions),
        "--out", str(archive),
        "--min-items", "12",
        "--window", "8",
        "--labels", str(raw.labels),
        "--scores", str(raw.scores),
    )
    step(
        "train",
        "train-classifier",
        "--labels", str(raw.labels),
        "--catalog", str(archive),
        "--out", str(model),
        "--learning-rate", "0.5",
        "--weight-decay", "0.0",
        "--epochs", "8",
        "--seed", "0",
    )
    step(
        "classify",
        "classify",
        "--model", str(model),
        "--catalog", str(archive),
        "--out", str(verdicts),
    )
    step("index", "build-index", "--catalog", str(archive), "--out", str(index))

    mixed = numbered(list(SENSITIVE_TITLES[:2]) + list(PLAIN_TITLES[:8]))
    plain = numbered(list(PLAIN_TITLES))
    local = numbered(list(SENSITIVE_TITLES[:5]))
    baseline_config = root / "baseline.json"
    baseline_config.write_text(
        json.dumps(
            {
                "scheme": "baseline",
                "server_backend": {"kind": "mock_scripted", "responses": [mixed]},
            }
        ),
        encoding="utf-8",
    )
    deobf_config = root / "deobf.json"
    deobf_config.write_text(
        json.dumps(
            {
                "scheme": "cat_obf_deobf",
                "scorer": {
                    "kind": "categorical",
                    "sensitive_categories": [SENSITIVE_CATEGORY],
                },
                "server_backend": {"kind": "mock_scripted", "responses": [plain]},
                "local_backend": {"kind": "mock_scripted", "responses": [local]},
            }
        ),
        encoding="utf-8",
    )
    step(
        "run_baseline",
        "run",
        "--config", str(baseline_config),
        "--catalog", str(archive),
        "--index", str(index),
        "--out", str(runs_root / "baseline"),
    )
    step(
        "run_deobf",
        "run",
        "--config", str(deobf_config),
        "--catalog", str(archive),
        "--index", str(index),
        "--out", str(runs_root / "deobf"),
    )
    step(
        "report",
        "report",
        "--runs", str(runs_root),
        "--baseline", "baseline",
        "--out", str(report_dir),
    )
    return SimpleNamespace(
        root=root,
        raw=raw,
        archive=archive,
        model=model,
        verdicts=verdicts,
        index=index,
        runs_root=runs_root,
        report_dir=report_dir,
        baseline_config=baseline_config,
        deobf_config=deobf_config,
        steps=steps,
    )


class TestFlow:
    def test_ingest_reports_counts(self, flow):
        _, out, _ = flow.steps["ingest"]
        assert "ingested 16 products" in out
        assert "3 eligible users" in out

    def test_train_reports_split_and_scores(self, flow):
        _, out, _ = flow.steps["train"]
        assert "trained on 11 examples" in out
        assert "val F1" in out and "test F1" in out

    def test_classify_writes_verdict_lines(self, flow):
        lines = flow.verdicts.read_text().splitlines()
        assert len(lines) == 16
        verdict = json.loads(lines[0])
        assert set(verdict) == {"product_id", "probability", "is_sensitive"}
        _, _, err = flow.steps["classify"]
        assert "classified 16 products" in err

    def test_index_summary(self, flow):
        _, out, _ = flow.steps["index"]
        assert "indexed 16 products at dimension 384" in out

    def test_run_archives_and_summary_lines(self, flow):
        for name, scheme in (("baseline", "baseline"), ("deobf", "cat_obf_deobf")):
            run_dir = flow.runs_root / name
            manifest = json.loads((run_dir / "manifest.json").read_text())
            assert manifest["scheme"] == scheme
            records = [
                json.loads(line)
                for line in (run_dir / "records.jsonl").read_text().splitlines()
            ]
            assert [r["user_id"] for r in records] == ["u001", "u002", "u003"]
        _, out, _ = flow.steps["run_baseline"]
        assert "3 ok, 0 failed" in out

    def test_report_for_runs_found_under_a_parent(self, flow):
        report = json.loads((flow.report_dir / "report.json").read_text())
        by_scheme = {b["scheme"]: b for b in report["schemes"]}
        assert set(by_scheme) == {"baseline", "cat_obf_deobf"}
        assert by_scheme["baseline"]["pl_b"] == 1.0
        assert by_scheme["baseline"]["pl_s"] == 1.0
        assert by_scheme["cat_obf_deobf"]["pl_b"] == 0.0
        assert by_scheme["cat_obf_deobf"]["pl_s"] == 0.0
        assert by_scheme["baseline"]["hr10_exact"] == pytest.approx(2 / 3)
        assert by_scheme["cat_obf_deobf"]["hr10_exact"] == pytest.approx(2 / 3)
        # sensitive categories are recovered from the categorical scorer
        assert report["sensitive_categories"] == [SENSITIVE_CATEGORY]
        assert by_scheme["cat_obf_deobf"]["per_group"] is not None
        assert (flow.report_dir / "report.txt").read_text().startswith("Scheme")

    def test_report_accepts_explicit_run_dirs(self, flow, tmp_path):
        code, out, _ = invoke(
            "report",
            "--runs", str(flow.runs_root / "baseline"), str(flow.runs_root / "deobf"),
            "--baseline", "baseline",
            "--out", str(tmp_path / "r"),
            "--sensitive-categories", SENSITIVE_CATEGORY,
        )
        assert code == 0
        assert "report over 2 runs" in out

    def test_global_config_and_seed_reach_the_run(self, flow, tmp_path):
        code, _, _ = invoke(
            "--config", str(flow.baseline_config),
            "--seed", "7",
            "run",
            "--catalog", str(flow.archive),
            "--index", str(flow.index),
            "--out", str(tmp_path / "run"),
        )
        assert code == 0
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["seed"] == 7

    def test_rerun_is_deterministic(self, flow, tmp_path):
        code, _, _ = invoke(
            "run",
            "--config", str(flow.deobf_config),
            "--catalog", str(flow.archive),
            "--index", str(flow.index),
            "--out", str(tmp_path / "again"),
        )
        assert code == 0

        def stripped(path):
            records = [json.loads(line) for line in path.read_text().splitlines()]
            for record in records:
                record.pop("timings")  # backend wall time is the one moving part
            return records

        assert stripped(tmp_path / "again" / "records.jsonl") == stripped(
            flow.runs_root / "deobf" / "records.jsonl"
        )


class TestExitCodes:
    def test_no_subcommand_prints_help(self):
        code, _, err = invoke()
        assert code == 2
        assert "usage: privrec" in err

    def test_unknown_subcommand_is_a_usage_error(self):
        with pytest.raises(SystemExit) as info:
            invoke("frobnicate")
        assert info.value.code == 2

    def test_missing_required_option_is_a_usage_error(self):
        with pytest.raises(SystemExit) as info:
            invoke("ingest")
        assert info.value.code == 2

    def test_invalid_config_json(self, flow, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code, _, err = invoke(
            "run",
            "--config", str(bad),
            "--catalog", str(flow.archive),
            "--index", str(flow.index),
            "--out", str(tmp_path / "out"),
        )
        assert code == 3
        assert "not valid JSON" in err

    def test_unknown_config_key(self, flow, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"scheme": "baseline", "paralellism": 2}))
        code, _, err = invoke(
            "run",
            "--config", str(bad),
            "--catalog", str(flow.archive),
            "--index", str(flow.index),
            "--out", str(tmp_path / "out"),
        )
        assert code == 3

    def test_run_without_any_config(self, flow, tmp_path):
        code, _, err = invoke(
            "run",
            "--catalog", str(flow.archive),
            "--index", str(flow.index),
            "--out", str(tmp_path / "out"),
        )
        assert code == 3
        assert "requires --config" in err

    def test_remote_embedding_without_endpoint(self, flow, tmp_path):
        code, _, err = invoke(
            "build-index",
            "--catalog", str(flow.archive),
            "--out", str(tmp_path / "index.bin"),
            "--embedding", "remote",
        )
        assert code == 3

    def test_unreachable_embedding_service(self, flow, tmp_path):
        code, _, err = invoke(
            "build-index",
            "--catalog", str(flow.archive),
            "--out", str(tmp_path / "index.bin"),
            "--embedding", "remote",
            "--endpoint", "http://127.0.0.1:9",
        )
        assert code == 4
        assert "unreachable" in err

    def test_report_on_a_directory_without_runs(self, flow, tmp_path):
        code, _, err = invoke(
            "report",
            "--runs", str(tmp_path),
            "--baseline", "baseline",
            "--out", str(tmp_path / "r"),
        )
        assert code == 3


class TestHttpBackendThroughCli:
    def test_auth_token_never_reaches_artifacts(self, flow, tmp_path, monkeypatch):
        token = "tok-3f19c2e8-do-not-leak"
        monkeypatch.setenv("PRIVREC_CLI_TOKEN", token)
        reply = numbered(list(SENSITIVE_TITLES[:2]) + list(PLAIN_TITLES[:8]))
        with chat_stub(reply) as stub:
            config = tmp_path / "http.json"
            config.write_text(
                json.dumps(
                    {
                        "scheme": "baseline",
                        "server_backend": {
                            "kind": "local_endpoint",
                            "base_url": stub.url,
                            "model": "test-model",
                            "auth_env": "PRIVREC_CLI_TOKEN",
                        },
                    }
                )
            )
            out_dir = tmp_path / "run"
            code, _, err = invoke(
                "run",
                "--config", str(config),
                "--catalog", str(flow.archive),
                "--index", str(flow.index),
                "--out", str(out_dir),
            )
            assert code == 0, err
            assert stub.requests[0]["authorization"] == f"Bearer {token}"
        for path in sorted(out_dir.rglob("*")):
            if path.is_file():
                assert token not in path.read_text(), path.name


class TestSelfcheck:
    def test_selfcheck_passes(self):
        code, out, _ = invoke("selfcheck")
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[-1] == "selfcheck passed"
        assert all(line.startswith("ok    ") for line in lines[:-1])
