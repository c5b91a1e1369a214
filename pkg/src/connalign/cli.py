"""Command-line entry point: synth, train, eval, interpret, ablate, verify.

Exit codes: 0 success, 1 validation or verification failure, 2 I/O or usage error.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import SplitSpec, SyntheticConfig, generate_synthetic, ground_truth, load_dataset, save_dataset, stratified_split
from .errors import CheckpointError, ConfigError, ConnAlignError
from .interpret import format_table, interpret, run_ablation_suite, write_interaction_report, write_jsonl
from .training import TrainConfig, evaluate_records, load_checkpoint, save_checkpoint, tokenize_records, train

log = logging.getLogger("connalign")

SECTIONS = {"synth": SyntheticConfig, "train": TrainConfig}
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# configuration


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def _set(target: dict, section: str, key: str, value) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(SECTIONS)}")
    known = {f.name for f in fields(SECTIONS[section])}
    if key not in known:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    target[section][key] = value


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    """Sectioned key = value file, then ``section.key=value`` overrides; unknown keys are errors."""
    cfg: dict[str, dict] = {s: {} for s in SECTIONS}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, _parse_value(raw))
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        _set(cfg, section, key, _parse_value(raw.strip()))
    return cfg


def _build(kind: str, values: dict):
    try:
        return SECTIONS[kind](**values)
    except TypeError as exc:
        raise ConfigError(f"[{kind}] {exc}") from None


def train_config(args) -> TrainConfig:
    cfg = _build("train", args.cfg["train"])
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    flags = {}
    if args.no_cl:
        flags["use_cl"] = False
    if args.no_sl:
        flags["use_sl"] = False
    if args.image_only and args.text_only:
        raise UsageError("--image-only and --text-only are mutually exclusive")
    if args.image_only:
        flags["use_text"] = False
    if args.text_only:
        flags["use_image"] = False
    return replace(cfg, **flags)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _dataset(path: str):
    root = Path(path)
    if not (root / "reports.jsonl").is_file():
        raise FileNotFoundError(f"{root} is not a dataset directory (no reports.jsonl)")
    return load_dataset(root)


def _split(records, cfg: TrainConfig):
    return stratified_split(records, SplitSpec(cfg.train_fraction, cfg.seed))


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _build("synth", args.cfg["synth"])
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _out_dir(args, "data")
    records = generate_synthetic(cfg)
    save_dataset(records, out)
    _write_json(ground_truth(cfg), out / "ground_truth.json")
    _write_json(cfg.to_dict(), out / "synth_config.json")
    print(json.dumps({"subjects": len(records), "regions": cfg.n_regions, "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_loss_history

    cfg = train_config(args)
    records = _dataset(args.data)
    out = _out_dir(args, "run")
    train_set, test_set = _split(records, cfg)
    log.info("training on %d subjects, evaluating on %d", len(train_set), len(test_set))
    ckpt, history = train(cfg, train_set, test_set, on_epoch=lambda e: log.info("epoch %s", json.dumps(e)))
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    write_jsonl(history, out / "history.jsonl")
    model = ckpt.build_model()
    metrics = evaluate_records(model, tokenize_records(test_set, ckpt.vocab, cfg.m_max))
    write_jsonl([{"split": "test", **metrics.to_dict()}], out / "test_metrics.jsonl")
    _write_json(cfg.to_dict(), out / "train_config.json")
    plot_loss_history(history, out / "loss_history.png")
    print(json.dumps({"split": "test", **metrics.to_dict()}))
    return 0


def _load(args):
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    records = _dataset(args.data)
    ckpt = load_checkpoint(path, n_regions=records[0].sc.region_count if records else None)
    return ckpt, records


def _select(records, ckpt, which: str):
    if which == "all":
        return list(records)
    train_set, test_set = _split(records, ckpt.config)
    return train_set if which == "train" else test_set


def cmd_eval(args) -> int:
    ckpt, records = _load(args)
    subset = _select(records, ckpt, args.split)
    model = ckpt.build_model()
    metrics = evaluate_records(model, tokenize_records(subset, ckpt.vocab, ckpt.config.m_max))
    row = {"split": args.split, **metrics.to_dict()}
    if args.out:
        write_jsonl([row], _out_dir(args, "") / f"metrics_{args.split}.jsonl")
    print(json.dumps(row))
    return 0


def cmd_interpret(args) -> int:
    from .plotting import plot_salience, plot_token_influence

    ckpt, records = _load(args)
    subset = _select(records, ckpt, args.split)
    model = ckpt.build_model()
    tok = tokenize_records(subset, ckpt.vocab, ckpt.config.m_max)
    report = interpret(model, tok, ckpt.vocab, k_subnets=args.k_subnets, k_tokens=args.k_tokens)
    out = _out_dir(args, "interpret")
    paths = write_interaction_report(report, out)
    truth = Path(args.data) / "ground_truth.json"
    planted = []
    if truth.is_file():
        planted = [p["region_name"] for p in json.loads(truth.read_text(encoding="utf-8"))["planted"]]
    plot_salience(report.salience, out / "subnetwork_salience.png", highlight=planted)
    plot_token_influence(report.influence, out / "token_influence.png")
    print(json.dumps({
        "top_subnetworks": [s["region"] for s in report.subnetworks],
        "top_tokens": [t["token"] for t in report.tokens],
        "files": sorted(str(p) for p in paths.values()),
    }))
    return 0


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    cfg = train_config(args)
    records = _dataset(args.data)
    out = _out_dir(args, "ablation")
    train_set, test_set = _split(records, cfg)
    rows = run_ablation_suite(cfg, train_set, test_set, on_run=lambda name, m: log.info("%s: acc %.4f", name, m.acc))
    write_jsonl(rows, out / "ablation.jsonl")
    table = format_table(rows, ["group", "variant", "acc", "sen", "spe", "f1"])
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    plot_ablation(rows, out / "ablation.png")
    print(table)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_verification

    results = run_verification(lambda r: print(r.line(), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ----------------------------------------------------------------------
# parser


def _global_flags(nested: bool) -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand; the nested copy leaves unset flags alone."""
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if nested else None)
    p.add_argument("--config", help="sectioned key = value file ([synth], [train])")
    p.add_argument("--set", dest="overrides", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--seed", type=int, help="seed for the subcommand's config section")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-cl", action="store_true", help="drop the connectome-level alignment loss")
    p.add_argument("--no-sl", action="store_true", help="drop the subject-level alignment loss")
    p.add_argument("--image-only", action="store_true", help="connectome encoder only")
    p.add_argument("--text-only", action="store_true", help="report encoder only")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(nested=True)
    parser = argparse.ArgumentParser(prog="connalign", description=__doc__.splitlines()[0], parents=[_global_flags(nested=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic paired dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("data")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "metrics for a checkpoint"),
                              ("interpret", cmd_interpret, "attention interaction reports")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("checkpoint", help="checkpoint file or training output directory")
        p.add_argument("data")
        p.add_argument("--split", choices=("train", "test", "all"), default="test")
        if name == "interpret":
            p.add_argument("--k-subnets", type=int, default=6)
            p.add_argument("--k-tokens", type=int, default=5)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", parents=[common], help="full model plus the four ablations")
    p.add_argument("data")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.cfg = load_config(args.config, args.overrides or [])
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConnAlignError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
