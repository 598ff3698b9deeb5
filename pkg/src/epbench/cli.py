"""Command-line harness: train, attack, corrupt, eval, uncertainty, report.

Every command that prints a number also writes the backing run records to a
CSV (JSON mirror via --format json), so results are regenerable from files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import (attacks, baseline, bench, corruptions, energy, training,
               uncertainty, unrolled)
from .bench import RunRecord
from .checkpoint import Checkpoint, load_checkpoint, model_fns, save_checkpoint
from .config import load_config
from .data import Dataset, channel_stats, load_cifar_binary, normalize_images, synth_dataset


def _split_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _split_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _synth_from_snapshot(snap: dict, split: str) -> Dataset:
    kind = snap.get("synth_kind", "blobs")
    shape = tuple(snap.get("input_shape", (1, 8, 8)))
    classes = int(snap.get("classes", 2))
    seed = int(snap.get("seed", 0))
    noise = float(snap.get("synth_noise", 0.5))
    if split == "train":
        return synth_dataset(kind, int(snap.get("n_train", 512)), shape, classes,
                             seed=seed, noise=noise, split="train")
    return synth_dataset(kind, int(snap.get("n_test", 256)), shape, classes,
                         seed=seed + 1, noise=noise, split="test")


def _load_eval_data(args, ckpt: Checkpoint) -> Dataset:
    source = getattr(args, "data", None) or ckpt.train_config.get("data", "synth")
    if source == "synth":
        ds = _synth_from_snapshot(ckpt.train_config, split="test")
    else:
        ds = load_cifar_binary(source, variant=getattr(args, "cifar_variant", "cifar10"))
    subset = getattr(args, "subset", None)
    if subset:
        ds = ds.subset(subset)
    return ds


def cmd_train(args) -> int:
    spec, cfg = load_config(args.config)
    if args.data == "synth":
        n_train, n_test = args.synth_n, max(args.synth_n // 2, 1)
        train = synth_dataset(args.synth_kind, n_train, spec.input_shape,
                              spec.readout_dim, seed=cfg.seed,
                              noise=args.synth_noise, split="train")
        test = synth_dataset(args.synth_kind, n_test, spec.input_shape,
                             spec.readout_dim, seed=cfg.seed + 1,
                             noise=args.synth_noise, split="test")
        snapshot = {"data": "synth", "synth_kind": args.synth_kind,
                    "input_shape": list(spec.input_shape), "classes": spec.readout_dim,
                    "n_train": n_train, "n_test": n_test, "seed": cfg.seed,
                    "synth_noise": args.synth_noise}
    else:
        train = load_cifar_binary(args.data, variant=args.cifar_variant)
        test = train
        snapshot = {"data": args.data, "seed": cfg.seed}
    mean, std = channel_stats(train.images)
    norm_train = Dataset(normalize_images(train.images, mean, std).astype(np.float32),
                         train.labels, train.classes, "train")
    norm_test = Dataset(normalize_images(test.images, mean, std).astype(np.float32),
                        test.labels, test.classes, "test")

    t0 = time.perf_counter()
    if args.model == "ep":
        params, history = training.train_ep(norm_train, spec, cfg, val_dataset=norm_test)
    elif args.model == "bp":
        params, history = baseline.train_bp(norm_train, spec, cfg, val_dataset=norm_test)
    else:
        if cfg.adversarial is None:
            cfg.adversarial = training.AdversarialBlock()
        # adv_epsilon is interpreted in model-input (normalized) space
        params, history = baseline.train_adv(norm_train, spec, cfg, val_dataset=norm_test)
    wall = time.perf_counter() - t0

    conv_step = 0
    if args.model == "ep":
        probe = np.asarray(norm_train.images[:64], dtype=np.float64)
        conv_step = energy.convergence_step(probe, params, spec)
    ckpt = Checkpoint(spec=spec, params=params, model_kind=args.model,
                      seed=cfg.seed, train_config=snapshot,
                      norm_mean=[float(v) for v in mean],
                      norm_std=[float(v) for v in std],
                      convergence_step=conv_step)
    save_checkpoint(args.out, ckpt)
    # every printed number stays regenerable from files
    history_path = str(args.out) + ".history.json"
    with open(history_path, "w") as fh:
        json.dump(history, fh, indent=2)
        fh.write("\n")
    for entry in history:
        line = f"epoch {entry['epoch']:3d}  train_acc {entry['train_acc']:.4f}"
        if "val_acc" in entry:
            line += f"  val_acc {entry['val_acc']:.4f}"
        print(line)
    msg = f"trained {args.model} model in {wall:.1f}s -> {args.out}"
    if args.model == "ep":
        msg += f" (free-phase convergence step {conv_step})"
    print(msg)
    return 0


def _white_box_fns(ckpt: Checkpoint, timestep: int | None):
    """grad/predict/logits-vjp closures in raw pixel space for any model kind."""
    mean, std = (ckpt.normalize if ckpt.normalize is not None
                 else (np.zeros(1), np.ones(1)))
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)

    def to_model(xs):
        return (np.asarray(xs, dtype=np.float64) - mean) / std

    if ckpt.model_kind == "ep":
        t = timestep

        def grad_fn(xs, ys):
            losses, g = unrolled.loss_and_grad_batch(to_model(xs), ys,
                                                     ckpt.params, ckpt.spec, t)
            return losses, g / std

        def predict_fn(xs):
            return np.argmax(energy.logits_at(to_model(xs), ckpt.params, ckpt.spec, t),
                             axis=-1)

        def logits_vjp_fn(xs):
            logits, vjp = unrolled.logits_and_vjp(to_model(xs), ckpt.params, ckpt.spec, t)
            return logits, lambda gz: vjp(gz) / std
    else:
        def grad_fn(xs, ys):
            losses, g = baseline.bp_loss_and_input_grad(to_model(xs), ys,
                                                        ckpt.params, ckpt.spec)
            return losses, g / std

        def predict_fn(xs):
            return baseline.bp_predict(to_model(xs), ckpt.params, ckpt.spec)

        def logits_vjp_fn(xs):
            logits, vjp = baseline.bp_logits_and_vjp(to_model(xs), ckpt.params, ckpt.spec)
            return logits, lambda gz: vjp(gz) / std

    return grad_fn, predict_fn, logits_vjp_fn


def _resolve_timestep(args, ckpt: Checkpoint) -> int | None:
    if ckpt.model_kind != "ep":
        return None
    if getattr(args, "timestep", None) is not None:
        return args.timestep
    return ckpt.convergence_step or ckpt.spec.t_free


def cmd_attack(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_eval_data(args, ckpt)
    xs = np.asarray(ds.images, dtype=np.float64)
    ys = ds.labels
    model_id = Path(args.ckpt).stem
    t = _resolve_timestep(args, ckpt)
    grad_fn, predict_fn, logits_vjp_fn = _white_box_fns(ckpt, t)
    _, logits_fn = model_fns(ckpt, timestep=t)

    records: list[RunRecord] = []
    t0 = time.perf_counter()
    clean_acc = float(np.mean(predict_fn(xs) == ys))
    records.append(RunRecord(model=model_id, attack="clean", accuracy=clean_acc,
                             n=len(ys), seed=args.seed,
                             wall_ms=(time.perf_counter() - t0) * 1000))
    print(f"clean accuracy: {clean_acc:.4f}")

    def make_cfg(family, strength):
        # square is linf-only and cw minimizes l2 regardless of args.norm
        norm = {"square": "linf", "cw": "l2"}.get(family, args.norm)
        return attacks.AttackConfig(
            family=family, norm=norm,
            epsilon=strength, steps=args.steps,
            cw_constant=strength if family == "cw" else 0.1,
            query_budget=args.query_budget, attack_timestep=t, seed=args.seed,
        )

    for strength in _split_floats(args.eps):
        families = ["pgd", "cw", "square"] if args.family == "suite" else [args.family]
        t0 = time.perf_counter()
        suite = attacks.attack_suite(
            xs, ys, ckpt.params, ckpt.spec, [make_cfg(f, strength) for f in families],
            grad_fn=grad_fn, predict_fn=predict_fn, logits_vjp_fn=logits_vjp_fn,
            query_model=logits_fn,
        )
        wall = (time.perf_counter() - t0) * 1000
        for key, res in suite.results.items():
            family, norm, _ = key.split("-")
            acc = res.robust_accuracy()
            records.append(RunRecord(model=model_id, attack=family, norm=norm,
                                     strength=strength, accuracy=acc, n=len(ys),
                                     seed=args.seed, wall_ms=wall / len(suite.results)))
            print(f"{family:6s} {norm} strength {strength:g}: "
                  f"robust accuracy {acc:.4f}")
        if args.family == "suite":
            records.append(RunRecord(model=model_id, attack="suite", norm=args.norm,
                                     strength=strength,
                                     accuracy=suite.worst_case_accuracy, n=len(ys),
                                     seed=args.seed, wall_ms=wall))
            print(f"suite  {args.norm} strength {strength:g}: "
                  f"worst-case accuracy {suite.worst_case_accuracy:.4f}")
    bench.emit_results(records, args.out, fmt=args.format)
    print(f"wrote {len(records)} records -> {args.out}")
    return 0


def cmd_corrupt(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_eval_data(args, ckpt)
    model_id = Path(args.ckpt).stem
    predict_fn, _ = model_fns(ckpt, timestep=_resolve_timestep(args, ckpt))
    kinds = args.kinds.split(",") if args.kinds else list(corruptions.KINDS)
    severities = _split_ints(args.severities)
    records = []
    t0 = time.perf_counter()
    grid = corruptions.corruption_sweep(ds, predict_fn, kinds=kinds,
                                        severities=severities, seed=args.seed)
    wall = (time.perf_counter() - t0) * 1000 / max(len(grid), 1)
    for (kind, sev), acc in sorted(grid.items()):
        name = "clean" if sev == 0 else kind
        records.append(RunRecord(model=model_id, attack=name, severity=sev,
                                 accuracy=acc, n=len(ds.labels), seed=args.seed,
                                 wall_ms=wall))
        print(f"{kind:15s} severity {sev}: accuracy {acc:.4f}")
    bench.emit_results(records, args.out, fmt=args.format)
    print(f"wrote {len(records)} records -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_eval_data(args, ckpt)
    predict_fn, _ = model_fns(ckpt, timestep=_resolve_timestep(args, ckpt))
    t0 = time.perf_counter()
    acc = bench.evaluate(predict_fn, ds, batch_size=args.batch_size)
    wall = (time.perf_counter() - t0) * 1000
    print(f"accuracy: {acc:.4f} on {len(ds.labels)} examples")
    out = args.out or (str(Path(args.ckpt).with_suffix("")) + "_eval.csv")
    bench.emit_results([RunRecord(model=Path(args.ckpt).stem, attack="clean",
                                  accuracy=acc, n=len(ds.labels), seed=ckpt.seed,
                                  wall_ms=wall)], out, fmt=args.format)
    print(f"wrote 1 record -> {out}")
    return 0


def cmd_uncertainty(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_eval_data(args, ckpt)
    t = _resolve_timestep(args, ckpt)
    predict_fn, _ = model_fns(ckpt, timestep=t)
    model_id = Path(args.ckpt).stem

    def model_eval(xs, _t):
        return predict_fn(xs)

    curve = uncertainty.disagreement_curve(
        model_eval, ds.images, args.norm, _split_floats(args.eps_grid),
        samples_per_eps=args.samples, t=t, seed=args.seed,
    )
    records = []
    for eps, rate, n in zip(curve.eps, curve.rate, curve.samples):
        records.append(RunRecord(model=model_id, attack="disagreement",
                                 norm=args.norm, strength=float(eps),
                                 accuracy=float(rate), n=int(n), seed=args.seed))
        print(f"eps {eps:g}: disagreement {rate:.4f} ({n} draws)")
    try:
        fit = uncertainty.fit_exponent(curve)
        print(f"uncertainty exponent alpha = {fit.alpha:.4f} "
              f"(residual {fit.residual:.4f}, {fit.n_cells} cells)")
        records.append(RunRecord(model=model_id, attack="exponent", norm=args.norm,
                                 strength=0.0, accuracy=fit.alpha, n=fit.n_cells,
                                 seed=args.seed))
    except ValueError as exc:
        print(f"exponent fit skipped: {exc}")
    bench.emit_results(records, args.out, fmt=args.format)
    print(f"wrote {len(records)} records -> {args.out}")
    return 0


def cmd_report(args) -> int:
    records = []
    for path in args.inputs:
        records.extend(bench.read_results(path))
    by_family: dict[str, list[float]] = {}
    for r in records:
        if r.attack != "clean":
            by_family.setdefault(r.attack, []).append(r.accuracy)
    for family, cells in sorted(by_family.items()):
        print(f"{family:15s} mean accuracy {np.mean(cells):.4f} over {len(cells)} cells")
    if args.mean_robustness:
        score = bench.mean_robustness(records)
        print(f"mean robustness: {score:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epbench",
                                 description="energy-model robustness benchmark")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--model", choices=("ep", "bp", "adv"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", default="synth", help="'synth' or CIFAR binary path")
    p.add_argument("--cifar-variant", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--synth-kind", choices=("blobs", "stripes"), default="blobs")
    p.add_argument("--synth-n", type=int, default=512)
    p.add_argument("--synth-noise", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="run attacks against a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--family", choices=("pgd", "cw", "square", "suite"), required=True)
    p.add_argument("--norm", choices=("l2", "linf"), default="linf")
    p.add_argument("--eps", required=True, help="comma list of strengths")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--timestep", type=int, default=None)
    p.add_argument("--query-budget", type=int, default=5000)
    p.add_argument("--data", default=None)
    p.add_argument("--cifar-variant", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("corrupt", help="severity sweep of natural corruptions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kinds", default="")
    p.add_argument("--severities", default="1,2,3,4,5")
    p.add_argument("--timestep", type=int, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--cifar-variant", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=cmd_corrupt)

    p = sub.add_parser("eval", help="clean accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--cifar-variant", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--timestep", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("uncertainty", help="disagreement curve and exponent fit")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--eps-grid", required=True, help="comma list, strictly increasing")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--norm", choices=("l2", "linf"), default="l2")
    p.add_argument("--timestep", type=int, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--cifar-variant", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=cmd_uncertainty)

    p = sub.add_parser("report", help="aggregate result files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--mean-robustness", action="store_true")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
