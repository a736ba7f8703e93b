"""Command-line entry point: ``t2mhn gen|train|eval|check|ablate``.

Exit codes: 0 success, 1 input error, 2 numeric failure, 3 property-check failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION
from .baseline import DIRECTIONS, SingularSystemError, baseline_fixed_rep
from .checks import SYMMETRY_TOL, check_equivariance, gradient_suite
from .engine import TrainConfig, TrainingDiverged, full_report, train
from .episodes import ParseError, PoolError, SyntheticConfig, gen_synthetic, load_pool, write_pool
from .hypernet import (
    ContractError,
    TargetSpec,
    config_hash,
    init_hypernet,
    init_nonev,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import harmonic_mean
from .numerics import DimensionError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PROPERTY = 0, 1, 2, 3

log = logging.getLogger("t2mhn")


class InputError(Exception):
    """Bad flags, configs or data files: exit code 1."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_json(path) -> tuple[dict, Path]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8")), path
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _out_dir(path) -> Path:
    if path is None:
        raise InputError("--out DIR is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    return out


def write_manifest(out: Path, command: str, config: dict, seed, inputs: list[Path],
                   outputs: list[str]) -> Path:
    """Written before any result file; only ``created`` varies between reruns."""
    manifest = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": outputs,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / "manifest.json"
    path.write_text(_dump(manifest), encoding="utf-8")
    return path


def _load_data(data_dir):
    if data_dir is None:
        raise InputError("--data DIR is required")
    d = Path(data_dir)
    try:
        pool = load_pool(d)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    inputs = [p for p in sorted(d.iterdir()) if p.name in
              ("descriptors.txt", "features.txt", "partition.json")]
    return pool, inputs


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    raw, cfg_path = _read_json(args.config)
    try:
        cfg = SyntheticConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid synthetic config: {exc}") from None
    out = _out_dir(args.out)
    names = ["descriptors.txt", "features.txt", "partition.json", "oracle.tsv"]
    write_manifest(out, "gen", cfg.to_dict(), cfg.seed, [cfg_path], names)
    pool, oracle = gen_synthetic(cfg)
    write_pool(out, pool, oracle)
    unseen = oracle.mean_pair_accuracy(pool.partition.unseen)
    print(f"wrote {len(pool.class_ids)} classes to {out}")
    print(f"sigma_x\t{oracle.sigma_x:.6g}")
    print(f"unseen_bayes_pair_accuracy\t{unseen:.4f}")
    return EXIT_OK


def _train_config(path) -> tuple[TrainConfig, dict, Path]:
    raw, cfg_path = _read_json(path)
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training config: {exc}") from None
    return cfg, raw, cfg_path


def _checkpoint_extra(cfg: TrainConfig) -> dict:
    return {"normalize_descriptors": cfg.normalize_descriptors, "task": cfg.task,
            "k_train": cfg.k_train}


def _check_dims(params, pool) -> None:
    if params.descriptor_dim != pool.descriptor_dim:
        raise InputError(f"descriptor dim mismatch: checkpoint {params.descriptor_dim}, "
                         f"data {pool.descriptor_dim}")
    if params.spec.feature_dim != pool.feature_dim:
        raise InputError(f"feature dim mismatch: checkpoint {params.spec.feature_dim}, "
                         f"data {pool.feature_dim}")


def cmd_train(args) -> int:
    cfg, raw, cfg_path = _train_config(args.config)
    pool, inputs = _load_data(args.data)
    out = _out_dir(args.out)
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, [cfg_path, *inputs],
                   ["checkpoint.json", "train_log.jsonl", "loss_curve.png"])
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %d  loss %.5f", rec["epoch"], rec["mean_loss"])
        try:
            params, records = train(cfg, pool, callback=record)
        except TrainingDiverged as exc:
            path = save_checkpoint(out / "checkpoint.last_good.json", exc.last_good, seed=cfg.seed,
                                   training_config=cfg.to_dict(), extra=_checkpoint_extra(cfg))
            print(f"error: {exc}; last good checkpoint: {path}", file=sys.stderr)
            return EXIT_NUMERIC
    ckpt = save_checkpoint(out / "checkpoint.json", params, seed=cfg.seed,
                           training_config=cfg.to_dict(), extra=_checkpoint_extra(cfg))
    if records:
        from .plotting import plot_loss_curve
        plot_loss_curve(records, out / "loss_curve.png")
    print(f"checkpoint\t{ckpt}")
    print(f"final_mean_loss\t{records[-1]['mean_loss']:.6f}")
    return EXIT_OK


def _load_params(path):
    if path is None:
        raise InputError("--checkpoint PATH is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p) + (p,)
    except (ContractError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{p}: unreadable checkpoint: {exc}") from None


def _summary_rows(name, report) -> list[str]:
    def f(x):
        return "" if x is None else f"{x:.4f}"
    return [f"{name}\t{f(report.seen_acc)}\t{f(report.unseen_acc)}\t{f(report.harmonic)}"]


def cmd_eval(args) -> int:
    params, doc, ckpt_path = _load_params(args.checkpoint)
    pool, inputs = _load_data(args.data)
    _check_dims(params, pool)
    one_class = doc.get("task") == "one_class"
    k = 1 if one_class else (args.k or doc.get("k_train") or 2)
    splits = (args.split,) if args.split else ("seen", "unseen")
    for s in splits:
        n = len(pool.classes(s))
        if k > n:
            raise InputError(f"k={k} exceeds the {n} classes of the {s} split")
    normalize = doc.get("normalize_descriptors", True)
    meta = {"checkpoint_sha256": _sha256(ckpt_path), "seed": doc.get("seed"),
            "config_hash": doc.get("training_config_hash"), "kind": doc["kind"]}
    out = Path(args.out) if args.out else None
    if out is not None:
        out = _out_dir(out)
        write_manifest(out, "eval", {"k": k, "splits": list(splits), "baseline": args.baseline},
                       doc.get("seed"), [ckpt_path, *inputs], ["report.json", "task_accuracy.png"])
    report = full_report(params, pool, k, splits, normalize, args.threads, metadata=meta,
                         one_class=one_class)
    doc_out = {"t2mhn": report.to_dict()}
    base = None
    if args.baseline and not one_class:
        try:
            _, base = baseline_fixed_rep(pool, args.direction, args.ridge_lambda, k, splits,
                                         args.threads)
        except SingularSystemError as exc:
            raise InputError(str(exc)) from None
        doc_out["baseline"] = base.to_dict()
    if one_class:
        print("split\tmean_auprc\tsem")
        for s, r in report.auprc.items():
            print(f"{s}\t{r['mean']:.4f}\t{r['sem']:.4f}")
    else:
        print("model\tseen\tunseen\tharmonic")
        for line in _summary_rows("t2mhn", report) + (_summary_rows("baseline", base) if base else []):
            print(line)
    if out is not None:
        (out / "report.json").write_text(_dump(doc_out), encoding="utf-8")
        if not one_class:
            from .plotting import plot_task_accuracies
            plot_task_accuracies(report, out / "task_accuracy.png", baseline=base)
    else:
        sys.stdout.write(_dump(doc_out))
    return EXIT_OK


FRESH_SPEC = TargetSpec(feature_dim=6, layers=2, hidden_dim=4, emit_biases=True)


def cmd_check(args) -> int:
    if args.checkpoint:
        params, _, _ = _load_params(args.checkpoint)
    else:
        e = 8
        if args.kind == "nonev":
            params = init_nonev(FRESH_SPEC, 3, [8], args.seed, e)
        else:
            params = init_hypernet(FRESH_SPEC, [8], args.seed, e)
    k_list = tuple(args.k_list)
    if getattr(params, "kind", "ev") == "nonev" and params.k not in k_list:
        k_list = k_list + (params.k,)
    eq = check_equivariance(params, trials=args.trials, k_list=k_list,
                            tolerance=args.tolerance, seed=args.seed)
    grads = gradient_suite(args.seed, kind=params.kind,
                           params=params if params.n_params <= 5000 else None)
    result = {"equivariance": eq.to_dict(), "gradients": grads,
              "passed": eq.passed and grads["passed"]}
    text = _dump(result)
    if args.out:
        out = _out_dir(args.out)
        (out / "check.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK if result["passed"] else EXIT_PROPERTY


ABLATION_VARIANTS = (
    ("T2M-HN 1-layer", "ev", 1),
    ("T2M-HN 2-layer", "ev", 2),
    ("1-layer w.o. EV", "nonev", 1),
    ("2-layer w.o. EV", "nonev", 2),
)


def run_ablation(cfg: TrainConfig, pool, seeds: int, threads: int = 1) -> list[dict]:
    rows = []
    for name, kind, layers in ABLATION_VARIANTS:
        scores = {"seen": [], "unseen": [], "harmonic": []}
        check = None
        for i in range(seeds):
            c = TrainConfig.from_dict({**cfg.to_dict(), "kind": kind, "target_layers": layers,
                                       "seed": cfg.seed + i})
            params, _ = train(c, pool)
            rep = full_report(params, pool, c.k_train, normalize=c.normalize_descriptors,
                              threads=threads)
            scores["seen"].append(rep.seen_acc)
            scores["unseen"].append(rep.unseen_acc)
            scores["harmonic"].append(harmonic_mean(rep.seen_acc, rep.unseen_acc))
            if check is None:
                check = check_equivariance(params, trials=20, k_list=(c.k_train,), seed=c.seed)
        row = {"variant": name, "kind": kind, "target_layers": layers, "seeds": seeds,
               "equivariance_check": "pass" if check.passed else "fail",
               "max_symmetry_deviation": max(check.last_dev, check.pen_dev, check.output_dev)}
        for m, v in scores.items():
            v = np.asarray(v)
            row[m] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                      "values": v.tolist()}
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    cfg, raw, cfg_path = _train_config(args.config)
    pool, inputs = _load_data(args.data)
    out = _out_dir(args.out)
    if args.seeds < 1:
        raise InputError("--seeds must be >= 1")
    write_manifest(out, "ablate", {**cfg.to_dict(), "ablation_seeds": args.seeds}, cfg.seed,
                   [cfg_path, *inputs], ["ablation.json", "ablation.tsv", "ablation.png"])
    try:
        rows = run_ablation(cfg, pool, args.seeds, args.threads)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    lines = ["variant\tseen_mean\tseen_std\tunseen_mean\tunseen_std\tharmonic_mean\tharmonic_std\tcheck"]
    for r in rows:
        lines.append("\t".join([r["variant"]] + [f"{r[m][s]:.4f}" for m in ("seen", "unseen", "harmonic")
                                                  for s in ("mean", "std")] + [r["equivariance_check"]]))
    footnote = (f"# mean and std over {args.seeds} seeds; 'check' is the permutation-symmetry "
                f"check of the emitted classifier (tolerance {SYMMETRY_TOL:g})")
    table = "\n".join(lines + [footnote]) + "\n"
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    (out / "ablation.json").write_text(_dump({"rows": rows, "footnote": footnote[2:],
                                              "config_hash": config_hash(cfg.to_dict())}),
                                       encoding="utf-8")
    from .plotting import plot_ablation
    plot_ablation(rows, out / "ablation.png")
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="t2mhn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic class pool")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a hypernetwork")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--split", choices=("seen", "unseen"), default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--baseline", action="store_true", help="also run the fixed-representation baseline")
    p.add_argument("--direction", choices=DIRECTIONS, default="text->visual")
    p.add_argument("--ridge-lambda", type=float, default=1.0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="permutation-symmetry and gradient checks")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--fresh", action="store_true")
    p.add_argument("--kind", choices=("ev", "nonev"), default="ev")
    p.add_argument("--tolerance", type=float, default=SYMMETRY_TOL)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--k-list", type=int, nargs="+", default=[2, 3, 5])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("ablate", help="EV vs non-EV, 1 vs 2 target layers")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, ParseError, PoolError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
