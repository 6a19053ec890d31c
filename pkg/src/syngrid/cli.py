"""Command-line entry point: ``syngrid {generate,parse,train,eval,inspect,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

from syngrid import __version__, presets
from syngrid.errors import SyngridError

ORACLE_CHECKPOINT = "oracle"


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _write_manifest(out: Path, command: str, args: argparse.Namespace, **extra) -> None:
    from syngrid.dataset import write_manifest

    resolved = {k: v for k, v in vars(args).items() if k not in ("func",)}
    write_manifest(
        out / "manifest.json",
        command=command,
        args=resolved,
        package_version=__version__,
        python=platform.python_version(),
        **extra,
    )


def _read_split_dir(data: Path):
    from syngrid.dataset import read_jsonl

    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    train = read_jsonl(data / "train.jsonl")
    val = read_jsonl(data / "val.jsonl") if (data / "val.jsonl").exists() else []
    test = read_jsonl(data / "test.jsonl")
    return manifest, train, val, test


# -- subcommands ------------------------------------------------------------


def cmd_generate(args) -> int:
    from syngrid.dataset import apply_split, generate_corpus, get_split, write_jsonl

    spec = get_split(args.split)
    corpus = generate_corpus(
        args.seed,
        args.train_size,
        args.test_size,
        args.max_relations,
        splits=[args.split],
        exclude=args.split if spec.compositional else None,
        n_val_per_split=args.val_size,
    )
    train, test = apply_split(corpus, spec)
    val = corpus.vals.get(args.split, [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "train.jsonl", train, args.include_mask)
    write_jsonl(out / "test.jsonl", test, args.include_mask)
    write_jsonl(out / "val.jsonl", val, args.include_mask)
    _write_manifest(
        out,
        "generate",
        args,
        seed=args.seed,
        split=spec.name,
        split_key=args.split,
        sizes={"train": len(train), "val": len(val), "test": len(test)},
        mask_included=args.include_mask,
    )
    print(f"wrote {len(train)} train, {len(val)} val, {len(test)} test episodes ({spec.name}) to {out}")
    return 0


def cmd_parse(args) -> int:
    from syngrid.grammar import parse_ast, render
    from syngrid.parsing import mask_from_constituency, mask_from_dependency, parse_constituency, parse_dependency

    ast = parse_ast(args.command)
    tokens = render(ast)
    if args.constituency:
        tree = parse_constituency(ast, tokens)
        print(tree.bracketed())
        payload = {"tokens": tokens, "tree": tree.bracketed(), "mask": mask_from_constituency(tree).to_list()}
    else:
        tree = parse_dependency(ast, tokens)
        payload = {**tree.to_dict(), "mask": mask_from_dependency(tree).to_list()}
    print(json.dumps(payload))
    return 0


def _configs(args):
    from syngrid.experiments import configs_from_preset

    return configs_from_preset(
        args.config,
        seed=args.seed,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        mask_source=getattr(args, "mask_source", None),
        share_encoder_weights=False if getattr(args, "no_sharing", False) else None,
        use_text_mask=False if getattr(args, "no_mask", False) else None,
        float64=True if getattr(args, "float64", False) else None,
    )


def cmd_train(args) -> int:
    from syngrid.training import config_hash, save_checkpoint, train

    manifest, train_eps, val_eps, _ = _read_split_dir(Path(args.data))
    model_cfg, train_cfg = _configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(train_eps, val_eps, model_cfg, train_cfg, history_path=out / "history.jsonl")
    save_checkpoint(out / "best.npz", result.model, {"best_step": result.best_step})
    (out / "config.json").write_text(json.dumps(result.model.config.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_manifest(
        out,
        "train",
        args,
        preset=args.config,
        model_config=result.model.config.to_dict(),
        train_config=train_cfg.to_dict(),
        config_hash=config_hash(result.model.config, train_cfg),
        data_manifest=manifest,
        best_step=result.best_step,
        best_val_exact_match=result.best_val_exact_match,
    )
    best = "n/a" if result.best_val_exact_match is None else f"{result.best_val_exact_match:.2f}"
    print(f"trained {len(result.history)} steps; best step {result.best_step}, val exact match {best}")
    return 0


def _predictor(checkpoint: str):
    from syngrid.training import ModelPredictor, OraclePredictor, load_checkpoint

    if checkpoint == ORACLE_CHECKPOINT:
        return OraclePredictor(), None
    model = load_checkpoint(checkpoint)
    return ModelPredictor(model), model


def cmd_eval(args) -> int:
    from syngrid.autodiff import checkpoint_digest
    from syngrid.dataset import read_jsonl
    from syngrid.training import evaluate

    data = Path(args.data)
    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    split = manifest.get("split_key", "test")
    episodes = {split: read_jsonl(data / f"{args.subset}.jsonl")}
    predictor, _ = _predictor(args.checkpoint)
    before = None if args.checkpoint == ORACLE_CHECKPOINT else checkpoint_digest(args.checkpoint)
    report = evaluate(predictor, episodes, seed=args.seed)
    if before is not None and checkpoint_digest(args.checkpoint) != before:
        raise RuntimeError("checkpoint changed during evaluation")
    for name in report.exact_match:
        print(f"{name}: {report.exact_match[name]:.2f} ({report.counts[name]} episodes)")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(with_predictions=True), indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_inspect(args) -> int:
    from syngrid.dataset import read_jsonl
    from syngrid.training import export_attention, load_checkpoint, referent_focus

    model = load_checkpoint(args.checkpoint)
    data = Path(args.data)
    episodes = read_jsonl(data / f"{args.subset}.jsonl")
    if not 0 <= args.index < len(episodes):
        raise SyngridError(f"episode index {args.index} out of range (0..{len(episodes) - 1})")
    ep = episodes[args.index]
    dump = export_attention(model, ep)
    arrays = dump.pop("_arrays")
    focus = referent_focus(model, episodes[: args.focus_limit])
    summary = {
        "command": ep.command,
        "row_sums": {k: [round(float(s), 6) for s in m.sum(axis=-1)] for k, m in arrays.items()},
        "referent_focus": focus,
        "focus_episodes": min(len(episodes), args.focus_limit),
    }
    print(json.dumps({"command": ep.command, "referent_focus": round(focus, 4)}))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "attention.json").write_text(json.dumps(dump) + "\n", encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        _write_manifest(out, "inspect", args)
    return 0


def cmd_ablate(args) -> int:
    from syngrid.experiments import REFERENCE_PARAMS, format_ablation, run_ablation, trend_holds

    manifest, train_eps, val_eps, test_eps = _read_split_dir(Path(args.data))
    model_cfg, train_cfg = _configs(args)
    split = manifest.get("split_key", "test")

    def progress(sharing, mask, seed, report):
        print(f"  [{sharing} / {mask}] seed {seed}: {report.exact_match[split]:.2f}", file=sys.stderr, flush=True)

    rows = run_ablation(train_eps, val_eps, {split: test_eps}, model_cfg, train_cfg, args.seeds, progress)
    print(format_ablation(rows))
    holds = trend_holds(rows, split)
    print(f"trend (sharing+mask >= neither): {'holds' if holds else 'does not hold'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "rows": [r.to_dict() for r in rows],
            "trend_holds": holds,
            "reference_params": REFERENCE_PARAMS,
        }
        (out / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        _write_manifest(out, "ablate", args, model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict())
    return 0


# -- parser -----------------------------------------------------------------


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="mini", help="preset name or JSON file (presets: %s)" % ", ".join(presets.available()))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=positive_int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=positive_int, default=None)
    p.add_argument("--float64", action="store_true", help="train in 64-bit mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syngrid",
        description="Syntax-guided attention masking on a grounded grid-world task.",
        epilog="presets: " + ", ".join(presets.available()),
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("generate", help="write a split corpus", allow_abbrev=False)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-size", type=positive_int, required=True)
    g.add_argument("--test-size", type=positive_int, default=500)
    g.add_argument("--val-size", type=positive_int, default=500)
    g.add_argument("--split", choices=["random", "a1", "b2", "c1"], default="random")
    g.add_argument("--max-relations", type=int, choices=[0, 1, 2], default=2)
    g.add_argument("--include-mask", action="store_true", help="store masks in the JSON lines")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("parse", help="print the parse tree and mask of a command", allow_abbrev=False)
    p.add_argument("--command", required=True)
    p.add_argument("--constituency", action="store_true")
    p.set_defaults(func=cmd_parse)

    t = sub.add_parser("train", help="train a model on a generated corpus", allow_abbrev=False)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_training_flags(t)
    t.add_argument("--mask-source", choices=["dependency", "constituency"], default=None)
    t.add_argument("--no-sharing", action="store_true")
    t.add_argument("--no-mask", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="exact match of a checkpoint (or 'oracle')", allow_abbrev=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--subset", choices=["test", "val", "train"], default="test")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump attention maps and referent focus", allow_abbrev=False)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--subset", choices=["test", "val", "train"], default="val")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--focus-limit", type=positive_int, default=500)
    i.add_argument("--out", default=None)
    i.set_defaults(func=cmd_inspect)

    a = sub.add_parser("ablate", help="weight sharing x mask grid", allow_abbrev=False)
    a.add_argument("--data", required=True)
    a.add_argument("--out", default=None)
    _add_training_flags(a)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.set_defaults(func=cmd_ablate, config="ablation")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SyngridError, KeyError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
