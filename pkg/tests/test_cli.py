import json

import pytest

from factverify.cli import main
from factverify.retrieval import load_index
from conftest import claim_row, write_jsonl
import synth


@pytest.fixture
def data(tmp_path):
    return synth.build(tmp_path)


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(d, out_prefix="", *extra):
    store = d / "store"
    assert run("ingest", "--claims", d / "claims.jsonl", "--evidence", d / "evidence.jsonl", "--out", store) == 0
    assert run("index", "--store", store) == 0
    assert run("retrieve", "--claims", store / "claims.jsonl", "--index", store, "--out",
               d / f"{out_prefix}rank.jsonl") == 0
    assert run("verify", "--claims", store / "claims.jsonl", "--index", store, "--backend",
               f"mock:{d / 'model.script'}", "--no-timing", "--out", d / f"{out_prefix}pred.jsonl", *extra) == 0
    assert run("evaluate", "--claims", store / "claims.jsonl", "--predictions", d / f"{out_prefix}pred.jsonl",
               "--rankings", d / f"{out_prefix}rank.jsonl", "--out", d / f"{out_prefix}report.json") == 0
    return json.loads((d / f"{out_prefix}report.json").read_text())


def test_full_pipeline(data, capsys):
    report = pipeline(data)
    assert report["n"] == 20
    assert set(report["recall_at"]) == {"1", "2", "3", "5"}
    assert -2 <= report["hcpi"] <= 1
    assert (data / "store" / "manifest.json").exists()
    assert run("report", "--report", data / "report.json") == 0
    out = capsys.readouterr().out
    assert "hcpi" in out and "R@3" in out


def test_runs_are_byte_identical(data):
    pipeline(data, "a_")
    pipeline(data, "b_")
    assert (data / "a_pred.jsonl").read_bytes() == (data / "b_pred.jsonl").read_bytes()
    assert (data / "a_report.json").read_bytes() == (data / "b_report.json").read_bytes()


def test_manifest_contents(data):
    pipeline(data, "", "--trace-dir", data / "traces")
    m = json.loads((data / "pred.jsonl.manifest.json").read_text())
    assert m["status"] == "ok" and m["command"] == "verify"
    assert str(data / "model.script") in m["inputs"]
    assert len(m["traces"]) == 20 and all((data / "traces").joinpath(t.split("/")[-1]).exists() for t in m["traces"])
    assert m["config"]["delta0"] == 20.0 and m["versions"]["factverify"]


def test_index_header_defaults_and_date_mode(data):
    store = data / "store"
    run("ingest", "--claims", data / "claims.jsonl", "--evidence", data / "evidence.jsonl", "--out", store)
    assert run("index", "--store", store) == 0
    idx = load_index(store / "index.jsonl")
    assert (idx.k1, idx.b, idx.date_mode) == (1.2, 0.75, "off")
    assert run("index", "--store", store, "--date-mode", "filter", "--out", data / "f.jsonl") == 0
    assert load_index(data / "f.jsonl").date_mode == "filter"


def test_ingest_errors(tmp_path, capsys):
    ev = write_jsonl(tmp_path / "ev.jsonl", [{"id": "e1", "text": "a"}, {"id": "e1", "text": "b"}])
    cl = write_jsonl(tmp_path / "cl.jsonl", [claim_row()])
    assert run("ingest", "--claims", cl, "--evidence", ev, "--out", tmp_path / "s") == 1
    assert "e1" in capsys.readouterr().err
    good = write_jsonl(tmp_path / "good.jsonl", [{"id": "e1", "text": "a"}])
    assert run("ingest", "--claims", tmp_path / "nope.jsonl", "--evidence", good, "--out", tmp_path / "s") == 1
    assert "nope.jsonl" in capsys.readouterr().err


def test_ingest_merges_extra_evidence(tmp_path):
    ev = write_jsonl(tmp_path / "ev.jsonl", [{"id": "e1", "text": "alpha"}])
    extra = write_jsonl(tmp_path / "x.jsonl", [{"id": "e2", "text": "alpha"}, {"id": "e1", "text": "beta"}])
    cl = write_jsonl(tmp_path / "cl.jsonl", [claim_row()])
    assert run("ingest", "--claims", cl, "--evidence", ev, "--extra-evidence", extra, "--out", tmp_path / "s") == 0
    ids = [json.loads(l)["id"] for l in (tmp_path / "s" / "evidence.jsonl").read_text().splitlines()]
    assert ids == ["e1", "e1~2"]


def test_index_empty_store(tmp_path):
    (tmp_path / "evidence.jsonl").write_text("")
    assert run("index", "--store", tmp_path) == 1


def test_evaluate_flags_and_errors(data, capsys):
    pipeline(data)
    store = data / "store"
    assert run("evaluate", "--claims", store / "claims.jsonl", "--predictions", data / "pred.jsonl",
               "--skip-retrieval-metrics", "--out", data / "r2.json") == 0
    assert "recall_at" not in json.loads((data / "r2.json").read_text())
    assert run("evaluate", "--claims", store / "claims.jsonl", "--predictions", data / "pred.jsonl",
               "--out", data / "r3.json") == 1
    lines = (data / "pred.jsonl").read_text().splitlines()
    (data / "short.jsonl").write_text("\n".join(lines[:-2]) + "\n")
    capsys.readouterr()
    assert run("evaluate", "--claims", store / "claims.jsonl", "--predictions", data / "short.jsonl",
               "--skip-retrieval-metrics", "--out", data / "r4.json") == 1
    err = capsys.readouterr().err
    assert "c18" in err and "c19" in err


def test_evaluate_forced_full_consistency(data):
    pipeline(data)
    assert run("evaluate", "--claims", data / "store" / "claims.jsonl", "--predictions", data / "pred.jsonl",
               "--skip-retrieval-metrics", "--judge", "full", "--out", data / "r.json") == 0
    rep = json.loads((data / "r.json").read_text())
    assert rep["accuracy"] == 1.0 and rep["hcpi"] == 1.0


def test_evaluate_hcpi_fixture(tmp_path):
    synth.hcpi_fixture(tmp_path)
    assert run("evaluate", "--claims", tmp_path / "claims.jsonl", "--predictions", tmp_path / "predictions.jsonl",
               "--skip-retrieval-metrics", "--judge", "partial", "--out", tmp_path / "r.json") == 0
    assert json.loads((tmp_path / "r.json").read_text())["hcpi"] == pytest.approx(0.15, abs=1e-12)


def test_resume_skips_done_claims(data):
    pipeline(data)
    pred = data / "pred.jsonl"
    full = pred.read_bytes()
    lines = full.decode().splitlines(keepends=True)
    pred.write_text("".join(lines[:5]))
    store = data / "store"
    assert run("verify", "--claims", store / "claims.jsonl", "--index", store, "--backend",
               f"mock:{data / 'model.script'}", "--no-timing", "--out", pred, "--resume") == 0
    assert pred.read_bytes() == full


def test_backend_errors(data, capsys):
    pipeline(data)
    store = data / "store"
    base = ["verify", "--claims", store / "claims.jsonl", "--index", store, "--out", data / "p.jsonl"]
    assert run(*base, "--backend", "carrier-pigeon") == 1
    assert run(*base, "--backend", "http://127.0.0.1:9", "--retries", "0", "--timeout", "0.5") == 2
    m = json.loads((data / "p.jsonl.manifest.json").read_text())
    assert m["status"].startswith("backend error")
    bad = data / "bad.script"
    bad.write_text("a | b:1,a:0\n")  # step token is not the argmax
    assert run(*base, "--backend", f"mock:{bad}") == 1


def test_config_precedence(data):
    pipeline(data)
    store = data / "store"
    cfg = data / "cfg.json"
    cfg.write_text(json.dumps({"verify": {"delta0": 7.5, "gamma": 0.5, "no_timing": True}}))
    base = ["--config", cfg, "verify", "--claims", store / "claims.jsonl", "--index", store,
            "--backend", f"mock:{data / 'model.script'}", "--out", data / "p.jsonl"]
    assert run(*base) == 0
    conf = json.loads((data / "p.jsonl.manifest.json").read_text())["config"]
    assert (conf["delta0"], conf["gamma"], conf["no_timing"]) == (7.5, 0.5, True)
    assert run(*base, "--delta0", "3") == 0
    conf = json.loads((data / "p.jsonl.manifest.json").read_text())["config"]
    assert (conf["delta0"], conf["gamma"]) == (3.0, 0.5)

    cfg.write_text(json.dumps({"verify": {"bogus": 1}}))
    with pytest.raises(SystemExit):
        run(*base)
