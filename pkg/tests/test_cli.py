import json

import pytest

from domainforge.checkpoint import load_checkpoint
from domainforge.cli import main
from domainforge.config import ConfigError, PipelineConfig


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_version(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0
    assert set(json.loads(out)) == {"domainforge", "checkpoint_format", "packed_format"}


def test_unknown_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["clean", "--in", "x", "--bogus"])
    assert exc.value.code == 2


def test_missing_input_gives_error_block(capsys, tmp_path):
    code, _, err = run(capsys, "clean", "--in", tmp_path / "missing.jsonl", "--out", tmp_path / "c.jsonl")
    assert code == 1
    block = json.loads(err)["error"]
    assert block["type"] == "FileNotFoundError" and block["command"] == "clean"
    assert block["path"].endswith("missing.jsonl")


def test_selftest(capsys):
    code, out, _ = run(capsys, "selftest")
    res = json.loads(out)
    assert code == 0
    assert res["max_relative_error"] < 1e-4 and res["mask_ok"]


def test_report_flags_table_mismatch(capsys, fixtures_dir, tmp_path):
    code, out, _ = run(capsys, "report", "--in", fixtures_dir / "qa_table.json", "--out", tmp_path / "r.json")
    assert code == 0
    rows = {r["name"]: r for r in json.loads(out)["rows"]}
    assert rows["ChatGPT"]["average"] == 54.97 and rows["ChatGPT"]["note"] is None
    assert rows["PMC-LLaMA 13B"]["average"] == 63.43
    assert "64.43" in rows["PMC-LLaMA 13B"]["note"]
    assert json.loads((tmp_path / "r.json").read_text())["rows"] == json.loads(out)["rows"]


def test_config_file_and_flag_precedence(capsys, tmp_path, fixtures_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "pack": {"context_len": 64}}))
    clean = tmp_path / "c.jsonl"
    run(capsys, "clean", "--in", fixtures_dir / "corpus" / "books.jsonl", "--out", clean)
    run(capsys, "pack", "--in", clean, "--source", "book", "--out", tmp_path / "a.bin", "--config", cfg)
    run(capsys, "pack", "--in", clean, "--source", "book", "--out", tmp_path / "b.bin", "--config", cfg, "--ctx", 32, "--seed", 9)
    a = json.loads((tmp_path / "a.bin.meta.json").read_text())
    b = json.loads((tmp_path / "b.bin.meta.json").read_text())
    assert a["context_len"] == 64 and a["config"]["seed"] == 5
    assert b["context_len"] == 32 and b["config"]["pack"]["context_len"] == 32 and b["config"]["seed"] == 9


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        PipelineConfig.from_json({"modle": {}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_json({"model": {"width": 3}}).model_config()


def _pipeline(capsys, fixtures_dir, out):
    out.mkdir()
    c, i = fixtures_dir / "corpus", fixtures_dir / "instruct"
    steps = [
        ("clean", "--in", c / "books.jsonl", c / "papers.jsonl", c / "general.jsonl", "--out", out / "clean.jsonl", "--workers", 2),
        *[("pack", "--in", out / "clean.jsonl", "--source", s, "--ctx", 32, "--out", out / f"{s}.bin") for s in ("book", "paper", "general")],
        ("train-inject", "--book", out / "book.bin", "--paper", out / "paper.bin", "--general", out / "general.bin",
         "--out", out / "k.ckpt", "--steps", 3, "--lr", 3e-3, "--d-model", 16, "--heads", 2, "--layers", 1, "--d-ff", 32,
         "--model-ctx", 512, "--log", out / "k.log"),
        ("build-instruct", "--conversations", i / "conversations.jsonl", "--choice", i / "mcqa_train.jsonl",
         "--qa", i / "mcqa_train.jsonl", "--kg-entities", i / "kg_entities.jsonl", "--kg-triples", i / "kg_triples.jsonl",
         "--variants", 3, "--provider", "fixture", "--out", out / "inst.jsonl"),
        ("train-instruct", "--data", out / "inst.jsonl", "--init", out / "k.ckpt", "--out", out / "i.ckpt",
         "--steps", 2, "--batch-size", 8, "--lr", 3e-3),
        ("eval", "--ckpt", out / "i.ckpt", "--data", f"{i / 'mcqa_train.jsonl'},{i / 'pubmedqa.jsonl'}",
         "--mode", "likelihood", "--setting", "zero-shot", "--out", out / "report.json"),
    ]
    for argv in steps:
        code, _, err = run(capsys, *argv, "--seed", 3)
        assert code == 0, (argv[0], err)
    return out


@pytest.mark.slow
def test_toy_pipeline_end_to_end_and_deterministic(capsys, fixtures_dir, tmp_path):
    a = _pipeline(capsys, fixtures_dir, tmp_path / "a")
    b = _pipeline(capsys, fixtures_dir, tmp_path / "b")
    report = json.loads((a / "report.json").read_text())
    assert set(report["datasets"]) == {"medmcqa", "medqa_usmle", "pubmedqa"}
    assert report["pipeline_config"]["seed"] == 3
    for name in ("clean.jsonl", "book.bin", "inst.jsonl", "k.log"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # Checkpoints record their own output path, so compare contents rather than bytes.
    for name in ("k.ckpt", "i.ckpt"):
        x, y = load_checkpoint(a / name), load_checkpoint(b / name)
        for group in ("params", "opt_m", "opt_v"):
            gx, gy = getattr(x, group), getattr(y, group)
            assert all((gx[k] == gy[k]).all() for k in gx), name
    strip = lambda r: {k: v for k, v in r.items() if k not in ("checkpoint", "pipeline_config")}
    assert strip(report) == strip(json.loads((b / "report.json").read_text()))
    ck = load_checkpoint(a / "i.ckpt")
    assert ck.state["meta"]["pipeline_config"]["seed"] == 3
    assert ck.state["meta"]["command"] == "train-instruct"
    meta = json.loads((a / "inst.jsonl.meta.json").read_text())
    assert meta["samples"] == 80 and meta["config"]["build"]["variants"] == 3


def test_resume_via_cli_matches_uninterrupted(capsys, fixtures_dir, tmp_path):
    c = fixtures_dir / "corpus"
    run(capsys, "clean", "--in", c / "books.jsonl", c / "papers.jsonl", c / "general.jsonl", "--out", tmp_path / "c.jsonl")
    for s in ("book", "paper", "general"):
        run(capsys, "pack", "--in", tmp_path / "c.jsonl", "--source", s, "--ctx", 32, "--out", tmp_path / f"{s}.bin")
    common = ["--book", tmp_path / "book.bin", "--paper", tmp_path / "paper.bin", "--general", tmp_path / "general.bin",
              "--d-model", 16, "--heads", 2, "--layers", 1, "--d-ff", 32, "--lr", 1e-3, "--epochs", 50]
    assert run(capsys, "train-inject", *common, "--steps", 6, "--out", tmp_path / "full.ckpt")[0] == 0
    assert run(capsys, "train-inject", *common, "--steps", 2, "--out", tmp_path / "part.ckpt")[0] == 0
    assert run(capsys, "train-inject", *common, "--steps", 4, "--resume", tmp_path / "part.ckpt", "--out", tmp_path / "res.ckpt")[0] == 0
    full, res = load_checkpoint(tmp_path / "full.ckpt"), load_checkpoint(tmp_path / "res.ckpt")
    assert full.state["step"] == res.state["step"] == 6
    for k in full.params:
        assert (full.params[k] == res.params[k]).all()
