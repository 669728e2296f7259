"""Command-line entry point: ``python -m siformer <subcommand> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .infer import OFF, EarlyExitConfig, evaluate, infer_adaptive, robustness_sweep
from .model import (
    SiformerConfig,
    count_flops,
    load_params,
    model_grad_check,
    parameter_count,
    save_params,
    tiny_config,
)
from .rectify import RectifyConfig, RectifyReport, rectify_sequence
from .sampling import AugmentConfig, SmoteConfig, augment, augment_rng, smote_balance
from .skeleton import (
    LabeledDataset, SchemaError, load_dataset, pad_to_max_frames, save_dataset, write_atomic,
)
from .synthetic import SyntheticSpec, generate_synthetic_dataset, split_synthetic
from .train import TrainConfig, preprocess, train

log = logging.getLogger("siformer")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- run config


def _build(cls, doc: dict, section: str):
    if not isinstance(doc, dict):
        raise ValueError(f"section {section!r} must be an object")
    known = [f.name for f in fields(cls)]
    unknown = set(doc) - set(known)
    if unknown:
        raise ValueError(f"unknown keys in {section!r}: {sorted(unknown)}; expected a subset of {known}")
    return cls(**doc)


def _plain(obj) -> dict:
    d = asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class RunConfig:
    """Every component config in one JSON document (sections are optional)."""
    model: dict = field(default_factory=dict)
    train: TrainConfig = TrainConfig()
    rectify: RectifyConfig = RectifyConfig()
    smote: SmoteConfig = SmoteConfig()
    augment: AugmentConfig = AugmentConfig()
    exit: EarlyExitConfig = EarlyExitConfig()
    seed: int | None = None

    SECTIONS = ("model", "train", "rectify", "smote", "augment", "exit", "seed")

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        if not isinstance(doc, dict):
            raise ValueError("run config must be a JSON object")
        unknown = set(doc) - set(cls.SECTIONS)
        if unknown:
            raise ValueError(f"unknown run config keys {sorted(unknown)}; expected {list(cls.SECTIONS)}")
        model = dict(doc.get("model", {}))
        if model:
            probe = {"num_classes": 2, **model}
            _build(SiformerConfig, probe, "model")
        run = cls(
            model=model,
            train=_build(TrainConfig, doc.get("train", {}), "train"),
            rectify=_build(RectifyConfig, doc.get("rectify", {}), "rectify"),
            smote=_build(SmoteConfig, doc.get("smote", {}), "smote"),
            augment=_build(AugmentConfig, doc.get("augment", {}), "augment"),
            exit=_build(EarlyExitConfig, doc.get("exit", {}), "exit"),
            seed=doc.get("seed"),
        )
        return run.with_seed(run.seed)

    def with_seed(self, seed: int | None) -> RunConfig:
        """A top-level seed overrides every component seed."""
        if seed is None:
            return self
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ValueError("seed must be an integer")
        return replace(self, seed=seed, model={**self.model, "attention_seed": seed},
                       train=replace(self.train, seed=seed), smote=replace(self.smote, seed=seed),
                       augment=replace(self.augment, seed=seed), exit=replace(self.exit, seed=seed))

    def model_config(self, num_classes: int | None = None) -> SiformerConfig:
        doc = dict(self.model)
        if num_classes is not None:
            doc.setdefault("num_classes", num_classes)
        return _build(SiformerConfig, doc, "model")

    def to_dict(self) -> dict:
        return {"model": dict(self.model), "train": self.train.to_dict(),
                "rectify": _plain(self.rectify), "smote": _plain(self.smote),
                "augment": _plain(self.augment), "exit": _plain(self.exit), "seed": self.seed}


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------- reporting


def _fmt(key: str, value) -> str:
    if key in ("top1", "accuracy", "val_accuracy"):
        return f"{100.0 * value:.2f}"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def report_metrics(metrics: dict) -> tuple[str, str]:
    """``(json_text, table_text)``.

    The JSON keeps the exact values in insertion order; the table shows
    accuracies as percentages, other floats with 4 decimals and FLOPs also
    in units of 1e9.
    """
    if not metrics:
        raise ValueError("no metrics to report")
    record = dict(metrics)
    if "avg_flops" in record:
        record["avg_gflops"] = record["avg_flops"] / 1e9
    text = json.dumps(record, indent=2)
    width = max(len(k) for k in record)
    table = "\n".join(f"{k:<{width}}  {_fmt(k, v)}" for k, v in record.items())
    return text, table


def _write_csv(path: str, header: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    write_atomic(path, buf.getvalue())


def _write_json(path: str, doc) -> None:
    write_atomic(path, json.dumps(doc, indent=2) + "\n")


def _emit(args, metrics: dict) -> None:
    text, table = report_metrics(metrics)
    if getattr(args, "out", None):
        write_atomic(args.out, text + "\n")
    print(table)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(args.classes, args.per_class, args.frames, args.noise, args.seed,
                         args.violation_rate, args.min_frames)
    if args.test_out:
        tr, te = split_synthetic(spec, args.test_per_class)
        save_dataset(tr, args.out)
        save_dataset(te, args.test_out)
        print(f"wrote {len(tr)} training and {len(te)} test sequences")
    else:
        ds = generate_synthetic_dataset(spec)
        save_dataset(ds, args.out)
        print(f"wrote {len(ds)} sequences to {args.out}")
    return 0


def cmd_rectify(args) -> int:
    cfg = RectifyConfig(args.alpha, tuple(args.motions.split(",")))
    ds = load_dataset(args.data)
    report = RectifyReport()
    out = ds.map(lambda s: rectify_sequence(s, cfg, report=report))
    save_dataset(out, args.out)
    if args.report:
        _write_json(args.report, report.to_dict())
    print(f"rectified {len(out)} sequences (alpha={cfg.alpha}, motions={','.join(cfg.motions)})")
    return 0


def cmd_oversample(args) -> int:
    ds = pad_to_max_frames(load_dataset(args.data))
    out = smote_balance(ds, SmoteConfig(args.k, args.seed))
    save_dataset(out, args.out)
    print(f"{len(ds)} -> {len(out)} sequences; class counts {out.class_counts}")
    return 0


def cmd_augment(args) -> int:
    run = load_run_config(args.config).with_seed(args.seed)
    cfg = replace(run.augment, enabled=True)
    ds = load_dataset(args.data)
    out = LabeledDataset(tuple(augment(s, cfg, augment_rng(cfg.seed, i, args.epoch))
                               for i, s in enumerate(ds)), ds.num_classes)
    save_dataset(out, args.out)
    print(f"augmented {len(out)} sequences (epoch {args.epoch})")
    return 0


def _run_from(args) -> RunConfig:
    run = load_run_config(args.config).with_seed(getattr(args, "seed", None))
    if getattr(args, "epochs", None) is not None:
        t = run.train
        run = replace(run, train=replace(t, epochs=args.epochs,
                                         milestones=tuple(m for m in t.milestones if m <= args.epochs)))
    return run


def cmd_train(args) -> int:
    run = _run_from(args)
    ds = load_dataset(args.data)
    mcfg = run.model_config(ds.num_classes)
    val = preprocess(load_dataset(args.validation), run.train, run.rectify) if args.validation else None
    params, history = train(ds, mcfg, run.train, run.rectify, run.augment, run.smote, validation=val)
    save_params(params, args.out)
    if args.history:
        _write_json(args.history, {"run": run.to_dict(), "epochs": history})
    last = history[-1]
    print(f"trained {len(history)} epochs; final loss {last['loss']:.4f}, "
          f"train accuracy {100 * last['accuracy']:.2f}; parameters {parameter_count(mcfg)}")
    return 0


def _exit_cfg(run: RunConfig, args) -> EarlyExitConfig:
    cfg = run.exit
    if getattr(args, "patience", None) is not None:
        p = args.patience
        cfg = replace(cfg, patience=OFF if p == OFF else _int_flag("--patience", p))
    if getattr(args, "site", None):
        cfg = replace(cfg, site=args.site)
    if getattr(args, "classifiers", None):
        cfg = replace(cfg, classifier_mode=args.classifiers)
    return cfg


def _int_flag(flag: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"{flag} expects an integer or '{OFF}', got {value!r}") from None


def _eval_data(args, run: RunConfig):
    return preprocess(load_dataset(args.data), run.train, run.rectify)


def cmd_eval(args) -> int:
    run = _run_from(args)
    params = load_params(args.checkpoint)
    metrics = evaluate(_eval_data(args, run), params, _exit_cfg(run, args))
    _emit(args, metrics)
    return 0


def cmd_infer(args) -> int:
    run = _run_from(args)
    params = load_params(args.checkpoint)
    cfg = _exit_cfg(run, args)
    ds = _eval_data(args, run)
    if len(ds) == 0:
        raise ValueError("no sequences to run")
    records = []
    for i, seq in enumerate(ds):
        label, trace = infer_adaptive(seq, params, cfg)
        records.append({"index": i, "target": seq.label, **trace.to_dict()})
        print(f"{i}: label {label} (target {seq.label}) exit layer {trace.exit_layer}"
              f"{' early' if trace.exited else ''}, {trace.flops} FLOPs")
    if args.out:
        _write_json(args.out, {"exit": _plain(cfg), "instances": records})
    return 0


def cmd_robustness(args) -> int:
    run = _run_from(args)
    params = load_params(args.checkpoint)
    parts = tuple(args.parts.split(","))
    ks = {p: [int(k) for k in args.k.split(",")] for p in parts} if args.k else None
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = robustness_sweep(load_dataset(args.data), params, _exit_cfg(run, args), parts, ks, seeds,
                            prepare=lambda d: preprocess(d, run.train, run.rectify))
    if args.out:
        _write_json(args.out, {"rows": rows})
    if args.csv:
        _write_csv(args.csv, ["part", "k", "seed", "top1"], rows)
    for r in rows:
        print(f"{r['part']:<10} k={r['k']:<2} seed={r['seed']}  {100 * r['top1']:.2f}")
    return 0


def cmd_flops(args) -> int:
    run = load_run_config(args.config)
    mcfg = run.model_config(args.classes)
    flops = count_flops(mcfg, args.frames, args.exit_layer, args.site)
    _emit(args, {"frames": args.frames, "exit_layer": args.exit_layer, "site": args.site,
                 "flops": flops, "gflops": flops / 1e9, "params": parameter_count(mcfg)})
    return 0


def cmd_alphasweep(args) -> int:
    run = _run_from(args)
    alphas = [float(a) for a in args.alphas.split(",")]
    train_ds, test_ds = load_dataset(args.data), load_dataset(args.test)
    mcfg = run.model_config(train_ds.num_classes)
    tcfg = replace(run.train, rectify=True)
    rows = []
    for alpha in alphas:
        rcfg = replace(run.rectify, alpha=alpha)
        params, _ = train(train_ds, mcfg, tcfg, rcfg, run.augment, run.smote)
        top1 = evaluate(preprocess(test_ds, tcfg, rcfg), params, EarlyExitConfig(patience=OFF))["top1"]
        rows.append({"alpha": alpha, "motions": "+".join(rcfg.motions), "top1": top1})
        print(f"alpha {alpha:.1f}  {'+'.join(rcfg.motions)}  {100 * top1:.2f}")
    if args.out:
        _write_csv(args.out, ["alpha", "motions", "top1"], rows)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = tiny_config(args.d, args.frames, args.classes, attention_mode=args.attention)
    report = model_grad_check(cfg, args.frames, args.seed, args.eps, args.tol)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max relative error {report.max_rel_error:.3e} over {len(report.per_param)} "
          f"parameter groups ({report.evaluations} evaluations, tol {args.tol:g})")
    for name in report.failures():
        print(f"  {name}: {report.per_param[name]:.3e}")
    return 0 if report.passed else 2


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="siformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic gloss dataset")
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--per-class", type=int, default=40)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--violation-rate", type=float, default=0.0)
    s.add_argument("--min-frames", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="synthetic.json")
    s.add_argument("--test-out", help="also write a held-out split here")
    s.add_argument("--test-per-class", type=int, default=20)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("rectify", help="clamp hand joint angles into their legal ranges")
    s.add_argument("--data", "--in", dest="data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=0.4)
    s.add_argument("--motions", default="AA,FE")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_rectify)

    s = sub.add_parser("oversample", help="SMOTE class balancing")
    s.add_argument("--data", "--in", dest="data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_oversample)

    s = sub.add_parser("augment", help="one augmented copy of every sequence")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epoch", type=int, default=0)
    s.set_defaults(fn=cmd_augment)

    def common(s, data=True, checkpoint=False):
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        if data:
            s.add_argument("--data", required=True)
        if checkpoint:
            s.add_argument("--checkpoint", required=True)

    def exit_flags(s):
        s.add_argument("--patience", help=f"integer >= 1 or '{OFF}'")
        s.add_argument("--site", choices=("encoder", "decoder"))
        s.add_argument("--classifiers", choices=("fresh", "trained"))

    s = sub.add_parser("train", help="train a model")
    common(s)
    s.add_argument("--out", required=True, help="checkpoint path (.npz)")
    s.add_argument("--history")
    s.add_argument("--validation")
    s.add_argument("--epochs", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    common(s, checkpoint=True)
    exit_flags(s)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("infer", help="per-instance adaptive inference traces")
    common(s, checkpoint=True)
    exit_flags(s)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("robustness", help="accuracy with keypoints removed")
    common(s, checkpoint=True)
    exit_flags(s)
    s.add_argument("--parts", default="left_hand,right_hand,body")
    s.add_argument("--k", help="comma-separated k values (default: all)")
    s.add_argument("--seeds", default="0")
    s.add_argument("--out")
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_robustness)

    s = sub.add_parser("flops", help="analytic FLOPs of one forward pass")
    s.add_argument("--config")
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--classes", type=int, default=100)
    s.add_argument("--exit-layer", type=int)
    s.add_argument("--site", choices=("encoder", "decoder"), default="encoder")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("alphasweep", help="train and test once per rectification alpha")
    common(s)
    s.add_argument("--test", required=True)
    s.add_argument("--alphas", default="0,0.2,0.4,0.6,0.8,1.0")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", help="CSV path")
    s.set_defaults(fn=cmd_alphasweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    s.add_argument("--d", type=int, default=12)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--attention", choices=("full", "probsparse"), default="probsparse")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, SchemaError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())
