"""Command-line entry point for the two-stage pipeline.

Every command accepts ``--config F`` (see :mod:`domainforge.config`) and
``--seed N``; explicit flags override file values.  The effective config is
written into each artifact: ``<out>.meta.json`` sidecars for data files, the
manifest for checkpoints, and the body of eval/report JSON.  Failures print a
JSON error block on stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from . import __version__
from .checkpoint import CKPT_VERSION, load_checkpoint
from .config import PipelineConfig
from .corpus import Diagnostic, DedupIndex, RawDocument, clean_corpus, filter_papers, ingest, read_clean, write_clean
from .evaluate import check_reported_average, evaluate, read_items, task_finetune_then_eval
from .instruct import (
    FixtureParaphraseProvider,
    FixtureRationaleProvider,
    build_choice_samples,
    build_conversation_samples,
    build_kg_samples,
    build_rationale_samples,
    read_jsonl,
    read_kg,
    read_samples,
    write_samples,
)
from .mixer import PACK_VERSION, Mixer, load_packed, pack, save_packed
from .model import ModelConfig, TransformerLM
from .selfcheck import run_selftest
from .train import InjectionTrainer, InstructionTrainer, model_from_checkpoint

log = logging.getLogger("domainforge")

COMMANDS = ("clean", "pack", "build-instruct", "train-inject", "train-instruct", "eval", "report", "selftest")


def versions() -> dict:
    return {"domainforge": __version__, "checkpoint_format": CKPT_VERSION, "packed_format": PACK_VERSION}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump(obj) + "\n")


def _meta(path, command: str, cfg: PipelineConfig, **extra) -> dict:
    meta = {"command": command, "config": cfg.to_json(), "versions": versions(), **extra}
    _write_json(f"{os.fspath(path)}.meta.json", meta)
    return meta


def _set(section: dict, key: str, value) -> None:
    if value is not None:
        section[key] = value


def _split(values: Sequence[str] | None) -> list[str]:
    out: list[str] = []
    for v in values or ():
        out.extend(x for x in v.split(",") if x)
    return out


# --- commands ----------------------------------------------------------------


def cmd_clean(args, cfg: PipelineConfig) -> dict:
    _set(cfg.clean, "workers", args.workers)
    if args.no_dedup:
        cfg.clean["dedup"] = False
    diags: list[Diagnostic] = []
    dropped_papers = 0
    docs: list[RawDocument] = []
    for path in args.inputs:
        raw = list(ingest(path, diags))
        papers = [d for d in raw if d.source == "paper"]
        kept_papers = {d.id for d in filter_papers(papers)}
        dropped_papers += len(papers) - len(kept_papers)
        docs.extend(d for d in raw if d.source != "paper" or d.id in kept_papers)
    index = DedupIndex(
        num_perm=int(cfg.clean.get("num_perm", 64)),
        threshold=float(cfg.clean.get("threshold", 0.9)),
        seed=cfg.seed,
    )
    kept, report = clean_corpus(docs, workers=int(cfg.clean.get("workers", 1)), dedup_enabled=bool(cfg.clean.get("dedup", True)), index=index)
    write_clean(args.out, kept)
    for d in diags:
        log.warning("%s line %s: %s", d.doc_id or "-", d.line, d.message)
    summary = {
        "out": args.out,
        "report": report.to_json(),
        "papers_without_pmc_id": dropped_papers,
        "diagnostics": [{"line": d.line, "doc_id": d.doc_id, "message": d.message} for d in diags],
    }
    _meta(args.out, "clean", cfg, inputs=list(args.inputs), **summary)
    return summary


def cmd_pack(args, cfg: PipelineConfig) -> dict:
    _set(cfg.pack, "context_len", args.ctx)
    ctx = int(cfg.pack["context_len"])
    docs = [d for d in read_clean(args.input) if d.source == args.source]
    packed = pack((d.text for d in docs), ctx)
    save_packed(args.out, packed)
    summary = {"out": args.out, "source": args.source, "documents": len(docs), "sequences": len(packed), "context_len": ctx, "tokens": int(packed.mask.sum())}
    _meta(args.out, "pack", cfg, input=args.input, **summary)
    return summary


def cmd_build_instruct(args, cfg: PipelineConfig) -> dict:
    _set(cfg.build, "variants", args.variants)
    _set(cfg.build, "provider", args.provider)
    _set(cfg.build, "rationale_style", args.rationale_style)
    if cfg.build.get("provider", "fixture") != "fixture":
        raise ValueError(f"unknown provider {cfg.build['provider']!r}; only 'fixture' ships")
    samples = []
    if args.conversations:
        samples += build_conversation_samples(read_jsonl(args.conversations), FixtureParaphraseProvider(), int(cfg.build.get("variants", 1)))
    if args.qa:
        samples += build_rationale_samples(read_items(_split(args.qa)), FixtureRationaleProvider(), cfg.build.get("rationale_style", "general"))
    if args.choice:
        samples += build_choice_samples(read_items(_split(args.choice)))
    if args.kg_entities or args.kg_triples:
        samples += build_kg_samples(*read_kg(args.kg_entities, args.kg_triples))
    if not samples:
        raise ValueError("no instruction sources given")
    write_samples(args.out, samples)
    kinds: dict[str, int] = {}
    for s in samples:
        kinds[s.kind] = kinds.get(s.kind, 0) + 1
    summary = {"out": args.out, "samples": len(samples), "kinds": kinds}
    _meta(args.out, "build-instruct", cfg, **summary)
    return summary


def _train_overrides(args, section: dict) -> None:
    for key in ("epochs", "lr", "batch_size", "max_steps", "checkpoint_every", "weight_decay"):
        _set(section, key, getattr(args, key, None))


def _model_overrides(args, section: dict) -> None:
    for key in ("d_model", "n_layers", "n_heads", "d_ff", "context_len", "pos_encoding", "ffn"):
        _set(section, key, getattr(args, key, None))


def _finish_training(trainer, args, cfg: PipelineConfig, command: str) -> dict:
    trainer.meta = {"command": command, "pipeline_config": cfg.to_json(), "versions": versions()}
    trainer.run()
    trainer.save(args.out)
    if args.log:
        trainer.log.write_jsonl(args.log)
    last = trainer.log[-1] if trainer.log else {}
    return {"out": args.out, "steps": trainer.step_count, "tokens_seen": trainer.tokens_seen, "last": last}


def cmd_train_inject(args, cfg: PipelineConfig) -> dict:
    _train_overrides(args, cfg.inject)
    _model_overrides(args, cfg.model)
    packed = {name: load_packed(p) for name, p in (("book", args.book), ("paper", args.paper), ("general", args.general)) if p}
    ctx = next(iter(packed.values())).context_len
    cfg.model.setdefault("context_len", ctx)
    tconf = cfg.train_config("inject")
    tconf.checkpoint_path = args.out
    mixer = Mixer(packed, tconf.batch_size, cfg.mix_ratio(), seed=cfg.seed)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = TransformerLM(ModelConfig(**ckpt.model_config))
        trainer = InjectionTrainer(model, mixer, tconf)
        trainer.load_state(ckpt)
    else:
        trainer = InjectionTrainer(TransformerLM(cfg.model_config()), mixer, tconf)
    return _finish_training(trainer, args, cfg, "train-inject")


def cmd_train_instruct(args, cfg: PipelineConfig) -> dict:
    _train_overrides(args, cfg.instruct)
    _model_overrides(args, cfg.model)
    tconf = cfg.train_config("instruct")
    tconf.checkpoint_path = args.out
    data = read_samples(args.data)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        trainer = InstructionTrainer(TransformerLM(ModelConfig(**ckpt.model_config)), data, tconf)
        trainer.load_state(ckpt)
    else:
        model = model_from_checkpoint(args.init) if args.init else TransformerLM(cfg.model_config())
        trainer = InstructionTrainer(model, data, tconf)
    summary = _finish_training(trainer, args, cfg, "train-instruct")
    summary["init"] = args.init
    return summary


def cmd_eval(args, cfg: PipelineConfig) -> dict:
    _set(cfg.eval, "mode", args.mode)
    if args.setting:
        cfg.eval["setting"] = args.setting.replace("-", "_")
    _set(cfg.eval, "template", args.template)
    _set(cfg.eval, "length_norm", args.length_norm)
    econf = cfg.eval_config()
    model = model_from_checkpoint(args.ckpt)
    items = read_items(_split(args.data))
    datasets = _split(args.datasets) or None
    if econf.setting == "task_finetune":
        if not args.train:
            raise ValueError("--setting task-finetune needs --train")
        _train_overrides(args, cfg.instruct)
        report = task_finetune_then_eval(model, read_items(_split(args.train)), items, cfg.train_config("instruct"), econf)
        report.checkpoint = args.ckpt
    else:
        report = evaluate(model, items, econf, checkpoint=args.ckpt, datasets=datasets)
    out = report.to_json()
    out["pipeline_config"] = cfg.to_json()
    out["versions"] = versions()
    if args.out:
        _write_json(args.out, out)
    return out


def cmd_report(args, cfg: PipelineConfig) -> dict:
    with open(args.input, "r", encoding="utf-8") as fh:
        table = json.load(fh)
    rows, notes = [], []
    for row in table["rows"]:
        avg, note = check_reported_average(row["name"], row["values"], row.get("reported"))
        rows.append({**row, "average": avg, "note": note})
        if note:
            notes.append(note)
    out = {"rows": rows, "notes": notes, "pipeline_config": cfg.to_json(), "versions": versions()}
    if args.out:
        _write_json(args.out, out)
    return out


def cmd_selftest(args, cfg: PipelineConfig) -> dict:
    result = run_selftest(cfg.seed)
    if not (result["gradient_ok"] and result["mask_ok"]):
        raise RuntimeError(f"selftest failed: {result}")
    return result


# --- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--steps", dest="max_steps", type=int, help="stop after this many steps")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--layers", dest="n_layers", type=int)
    p.add_argument("--heads", dest="n_heads", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--model-ctx", dest="context_len", type=int)
    p.add_argument("--pos", dest="pos_encoding", choices=["rotary", "learned"])
    p.add_argument("--ffn", choices=["gelu", "swiglu"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domainforge", description="Desk-scale domain adaptation pipeline.")
    parser.add_argument("--version", action="store_true", help="print artifact and format versions")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("clean", help="ingest, filter, clean and deduplicate corpus files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", default="clean.jsonl")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-dedup", action="store_true")
    _common(p)

    p = sub.add_parser("pack", help="pack one source of a cleaned corpus into fixed windows")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--source", required=True, choices=["book", "paper", "general"])
    p.add_argument("--ctx", type=int)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("build-instruct", help="build the instruction dataset")
    p.add_argument("--conversations")
    p.add_argument("--qa", action="append", help="MCQA items paired with rationales")
    p.add_argument("--choice", action="append", help="MCQA items as plain choice supervision")
    p.add_argument("--kg-entities", dest="kg_entities")
    p.add_argument("--kg-triples", dest="kg_triples")
    p.add_argument("--variants", type=int)
    p.add_argument("--provider")
    p.add_argument("--rationale-style", dest="rationale_style", choices=["general", "optionwise"])
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("train-inject", help="knowledge injection over mixed batches")
    p.add_argument("--book", required=True)
    p.add_argument("--paper")
    p.add_argument("--general")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--log")
    _train_flags(p)
    _model_flags(p)
    _common(p)

    p = sub.add_parser("train-instruct", help="response-masked instruction tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="start from this checkpoint's parameters")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--log")
    _train_flags(p)
    _model_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="multiple-choice QA evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", action="append", required=True, help="MCQA files, comma separated or repeated")
    p.add_argument("--mode", choices=["likelihood", "generative"])
    p.add_argument("--setting", choices=["zero-shot", "zero_shot", "task-finetune", "task_finetune"])
    p.add_argument("--template", choices=["instruct", "cloze"])
    p.add_argument("--length-norm", dest="length_norm", choices=["per_token_mean", "sum"])
    p.add_argument("--datasets", action="append", help="dataset groups expected in the average")
    p.add_argument("--train", action="append", help="training items for task-finetune")
    p.add_argument("--out")
    _train_flags(p)
    _common(p)

    p = sub.add_parser("report", help="recompute table-row averages and flag mismatches")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("selftest", help="gradient and loss-mask self-checks")
    _common(p)
    return parser


HANDLERS = {
    "clean": cmd_clean,
    "pack": cmd_pack,
    "build-instruct": cmd_build_instruct,
    "train-inject": cmd_train_inject,
    "train-instruct": cmd_train_instruct,
    "eval": cmd_eval,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.version:
        print(_dump(versions()))
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        result = HANDLERS[args.command](args, cfg)
    except Exception as exc:  # reported as a machine-readable block
        block = {"error": {"command": args.command, "type": type(exc).__name__, "message": str(exc)}}
        if isinstance(exc, FileNotFoundError):
            block["error"]["path"] = exc.filename
        print(_dump(block), file=sys.stderr)
        return 1
    print(_dump(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
