"""Command-line interface.

Every command that takes hyperparameters resolves them in three layers:
defaults, then ``--config FILE`` (or the configuration stored in a
checkpoint), then individual flags such as ``--lr-model 5e-4``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .corpus import ConfigError, CorpusSpec, DataError, Vocabulary, default_spec, generate_corpus, read_corpus_dir, write_corpus_dir
from .metrics import strip_special
from .engine import NumericError, load_checkpoint, save_checkpoint
from .model import XProNet, inspect_sample
from .proto_init import export_pm_csv, load_pm, save_pm
from .train import evaluate_model, generate_reports, prepare_pm, train_model

log = logging.getLogger("xpronet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.xpro"
PM_NAME = "pm.xpm"


# -- argument plumbing ------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (overrides --config)")
    group.add_argument("--config", help="JSON run configuration")
    group.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        else:
            group.add_argument(flag, dest=f.name, type=type(f.default), default=argparse.SUPPRESS, metavar=f.name.upper())


def _overrides(args: argparse.Namespace) -> dict:
    names = {f.name for f in fields(RunConfig)}
    return {k: v for k, v in vars(args).items() if k in names}


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> RunConfig:
    raw = dict(base or {})
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        file_cfg = RunConfig.from_json(text)
        raw.update(file_cfg.to_dict())
    raw.update(_overrides(args))
    return RunConfig.from_dict(raw)


def _run_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.run_dir or "run")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def update_manifest(run_dir: Path, cfg: RunConfig, command: str, artifacts: dict, corpus_seed: int | None) -> None:
    """Merge one command's artifacts into ``manifest.json``."""
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(
        {
            "version": __version__,
            "config_hash": cfg.hash(),
            "seeds": {"run": cfg.seed, "corpus": corpus_seed},
            "ablation": cfg.ablation_flags(),
        }
    )
    manifest.setdefault("commands", {})[command] = {"config_hash": cfg.hash(), "artifacts": artifacts}
    _write_json(path, manifest)


def _load_data(cfg: RunConfig):
    if not cfg.data_dir:
        raise ConfigError("data_dir is not set (use --data-dir or the config file)")
    return read_corpus_dir(cfg.data_dir)


def _load_model(args) -> tuple[XProNet, RunConfig, Vocabulary]:
    state, meta = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, meta["config"])
    vocab = Vocabulary(meta["vocab"])
    model = XProNet(cfg, len(vocab), pm=state.get("proto.pm"))
    model.load_state(state)
    return model, cfg, vocab


def _split(splits: dict, name: str):
    if name not in splits:
        raise DataError(f"unknown split {name!r}")
    if not splits[name]:
        raise DataError(f"split {name!r} is empty")
    return splits[name]


# -- commands -----------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    overrides = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read corpus spec {args.spec}: {exc}") from exc
        spec = CorpusSpec.from_dict(raw)
        if args.seed is not None:
            spec.seed = args.seed
        if args.n_samples is not None:
            spec.n_samples = args.n_samples
        spec.validate()
    else:
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.n_samples is not None:
            overrides["n_samples"] = args.n_samples
        spec = default_spec(**overrides)
    sizes = write_corpus_dir(args.out, spec, generate_corpus(spec))
    print(json.dumps(sizes, sort_keys=True))
    return EXIT_OK


def cmd_init_pm(args) -> int:
    cfg = resolve_config(args)
    spec, vocab, splits = _load_data(cfg)
    pm = prepare_pm(cfg, splits["train"], len(vocab))
    run_dir = _run_dir(cfg)
    out = Path(args.out) if args.out else run_dir / PM_NAME
    save_pm(out, pm.values)
    summary = {"shape": list(pm.shape), "cluster_mean_fraction": pm.cluster_mean_fraction(), "path": str(out)}
    print(json.dumps(summary, sort_keys=True))
    update_manifest(run_dir, cfg, "init-pm", {"pm": str(out)}, spec.seed)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    spec, vocab, splits = _load_data(cfg)
    run_dir = _run_dir(cfg)
    pm = None
    artifacts = {}
    if not cfg.disable_cmpnet:
        if cfg.pm_path:
            pm = load_pm(cfg.pm_path)
        else:
            pm = prepare_pm(cfg, splits["train"], len(vocab)).values
            save_pm(run_dir / PM_NAME, pm)
            artifacts["pm"] = str(run_dir / PM_NAME)
    result = train_model(cfg, splits["train"], splits["val"], len(vocab), pm, loss_csv=run_dir / "loss.csv")
    meta = {
        "config": cfg.to_dict(),
        "vocab": vocab.tokens,
        "best_epoch": result.best_epoch,
        "best_val_bleu_4": result.best_val_bleu_4,
        "corpus_seed": spec.seed,
    }
    save_checkpoint(run_dir / CHECKPOINT_NAME, result.model.params, meta)
    artifacts.update({"checkpoint": str(run_dir / CHECKPOINT_NAME), "loss_csv": str(run_dir / "loss.csv")})
    update_manifest(run_dir, cfg, "train", artifacts, spec.seed)
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_bleu_4": result.best_val_bleu_4}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, _ = _load_model(args)
    spec, _, splits = _load_data(cfg)
    samples = _split(splits, args.split)
    scores = evaluate_model(model, samples, jobs=cfg.jobs)
    payload = {"split": args.split, "decode_mode": cfg.decode_mode, "config_hash": cfg.hash(), "metrics": scores}
    run_dir = _run_dir(cfg)
    out = Path(args.out) if args.out else run_dir / f"metrics_{args.split}.json"
    _write_json(out, payload)
    print(json.dumps(scores, sort_keys=True))
    update_manifest(run_dir, cfg, "eval", {"metrics": str(out)}, spec.seed)
    return EXIT_OK


def cmd_generate(args) -> int:
    model, cfg, vocab = _load_model(args)
    spec, _, splits = _load_data(cfg)
    samples = _split(splits, args.split)
    hyps = generate_reports(model, samples, jobs=cfg.jobs)
    run_dir = _run_dir(cfg)
    out = Path(args.out) if args.out else run_dir / f"reports_{args.split}.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        for s, h in zip(samples, hyps):
            text = " ".join(vocab.decode(strip_special(h.tokens)))
            fh.write(json.dumps({"id": s.id, "tokens": h.tokens, "text": text, "log_prob": h.log_prob}) + "\n")
    update_manifest(run_dir, cfg, "generate", {"reports": str(out)}, spec.seed)
    print(str(out))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, cfg, vocab = _load_model(args)
    spec, _, splits = _load_data(cfg)
    matches = [s for part in splits.values() for s in part if s.id == args.sample_id]
    if not matches:
        raise DataError(f"no sample with id {args.sample_id!r}")
    sample = matches[0]
    labels = sample.labels if cfg.inference_label_mode == "oracle" else None
    records = inspect_sample(model, sample.image, labels)
    for rec in records:
        rec["id"] = sample.id
        if rec["kind"] == "report":
            rec["text"] = " ".join(vocab.decode(rec["tokens"]))
        elif rec["kind"] == "token":
            rec["word"] = vocab.decode([rec["token"]])[0]
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if args.out:
        Path(args.out).write_text(lines)
        update_manifest(_run_dir(cfg), cfg, "inspect", {"dump": args.out}, spec.seed)
    else:
        sys.stdout.write(lines)
    return EXIT_OK


def cmd_export_pm_csv(args) -> int:
    if bool(args.pm) == bool(args.checkpoint):
        raise ConfigError("give exactly one of --pm or --checkpoint")
    if args.pm:
        values = load_pm(args.pm)
    else:
        state, _ = load_checkpoint(args.checkpoint)
        if "proto.pm" not in state:
            raise DataError("checkpoint has no prototype matrix (trained with disable_cmpnet)")
        values = state["proto.pm"]
    export_pm_csv(args.out, values)
    print(args.out)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xpronet", description="Cross-modal prototype report generation on a synthetic corpus.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic corpus and its 70/10/20 split")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="corpus spec JSON (default: built-in spec)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-samples", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("init-pm", parents=[common], help="initialise the prototype matrix from the training split")
    p.add_argument("--out", help="output file (default: RUN_DIR/pm.xpm)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_init_pm)

    p = sub.add_parser("train", parents=[common], help="train a model and keep the best validation checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("eval", cmd_eval, "score generated reports with BLEU-1..4 and ROUGE-L"),
        ("generate", cmd_generate, "write generated reports as JSON lines"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--out")
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("inspect", parents=[common], help="dump selected prototypes per patch and per generated token")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--out", help="JSON-lines file (default: stdout)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("export-pm-csv", parents=[common], help="export a prototype matrix as CSV")
    p.add_argument("--pm")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_pm_csv)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "print_config", False):
            base = None
            if getattr(args, "checkpoint", None):
                base = load_checkpoint(args.checkpoint)[1]["config"]
            print(resolve_config(args, base).to_json())
            return EXIT_OK
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
