"""Command-line surface: dataset generation, training, evaluation, probing.

Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checks
from .assignment import AssignmentProblem, oracle_smooth, solve_hard, solve_smooth
from .intermediate import counting_oracle_sT, fit_lda, fit_subclass_model
from .io import (
    ExperimentConfig,
    FormatError,
    generate_pattern_blobs,
    load_dataset,
    parse_config,
    np_dtype,
)
from .kd_layer import init_kd_layer, kd_distill_loss, kd_forward
from .model import arch_spec
from .persist import load_checkpoint, load_labelers, save_checkpoint, save_labelers
from .tensor import NumericalError, Tensor, no_grad
from .train import (
    KD_LAYER_VARIANTS,
    TrainPlan,
    ablate_alpha,
    build_labelers,
    evaluate,
    linear_probe,
    train_student,
    train_teacher,
)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(_require(args.config, "config file"))
    if getattr(args, "seed", None) is not None:
        cfg.sections["io"]["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg.sections["io"]["out"] = args.out
    if getattr(args, "variant", None) is not None:
        cfg.sections["kd"]["variant"] = args.variant
    return cfg


def _plan(cfg: ExperimentConfig) -> TrainPlan:
    return TrainPlan.from_config(cfg)


def _out_dir(cfg: ExperimentConfig) -> str:
    out = cfg["io"]["out"]
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    generate_pattern_blobs(cfg["data"]["path"], classes=cfg["data"]["classes"],
                           train=cfg["data"]["train"], test=cfg["data"]["test"],
                           size=cfg["data"]["size"], motif=cfg["data"]["motif"],
                           seed=cfg["io"]["seed"])
    print(f"wrote dataset bundle to {cfg['data']['path']}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(_require(cfg["data"]["path"], "dataset bundle"))
    out = _out_dir(cfg)
    plan = _plan(cfg)
    spec = arch_spec(cfg["teacher"]["arch"], dataset.classes)
    metrics = os.path.join(out, "teacher-metrics.csv")
    if os.path.exists(metrics):
        os.remove(metrics)
    teacher, summary = train_teacher(spec, plan, dataset, metrics_path=metrics)
    save_checkpoint(cfg["teacher"]["checkpoint"], teacher,
                    meta={"test_top1": summary["test_top1"],
                          "train_top1": summary["train_top1"], "arch": cfg["teacher"]["arch"]})
    print(f"teacher test top1 {summary['test_top1']:.4f} -> {cfg['teacher']['checkpoint']}")
    return 0


def cmd_gen_labels(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(_require(cfg["data"]["path"], "dataset bundle"))
    teacher_model, _, _ = load_checkpoint(_require(cfg["teacher"]["checkpoint"],
                                                   "teacher checkpoint"))
    plan = _plan(cfg)
    # always produce the full bundle so one gen-labels run serves every variant
    plan.variant = "kd-both"
    student_spec = arch_spec(cfg["student"]["arch"], dataset.classes)
    bundle = build_labelers(teacher_model.cnn, dataset, plan, student_spec)
    save_labelers(cfg["kd"]["labelers"], bundle)
    print(f"wrote labelers to {cfg['kd']['labelers']}")
    return 0


def _load_training_inputs(cfg, plan):
    dataset = load_dataset(_require(cfg["data"]["path"], "dataset bundle"))
    teacher = labelers = None
    if plan.variant in KD_LAYER_VARIANTS or plan.variant == "logit-kd":
        tm, _, _ = load_checkpoint(_require(cfg["teacher"]["checkpoint"], "teacher checkpoint"))
        teacher = tm.cnn
    if plan.variant in KD_LAYER_VARIANTS:
        labelers = load_labelers(_require(cfg["kd"]["labelers"], "labeler bundle"))
    return dataset, teacher, labelers


def cmd_train_student(args) -> int:
    cfg = _load_config(args)
    plan = _plan(cfg)
    dataset, teacher, labelers = _load_training_inputs(cfg, plan)
    out = _out_dir(cfg)
    tag = f"{plan.variant}-s{plan.seed}"
    metrics = os.path.join(out, f"metrics-{tag}.csv")
    if os.path.exists(metrics):
        os.remove(metrics)
    spec = arch_spec(cfg["student"]["arch"], dataset.classes)
    student, summary = train_student(spec, plan, dataset, teacher=teacher,
                                     labelers=labelers, metrics_path=metrics)
    ckpt = os.path.join(out, f"student-{tag}")
    save_checkpoint(ckpt, student, meta={"test_top1": summary["test_top1"],
                                         "train_top1": summary["train_top1"],
                                         "variant": plan.variant, "seed": plan.seed,
                                         "arch": cfg["student"]["arch"]})
    print(f"student[{tag}] test top1 {summary['test_top1']:.4f} -> {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(_require(cfg["data"]["path"], "dataset bundle"))
    model, meta, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    dtype = np_dtype(meta.get("dtype", "f64"))
    top1 = evaluate(model, dataset, split=args.split, dtype=dtype)
    print(f"{args.split} top1 {top1:.4f}")
    if "test_top1" in meta and args.split == "test":
        print(f"checkpoint metadata top1 {meta['test_top1']:.4f}")
    return 0


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(_require(cfg["data"]["path"], "dataset bundle"))
    model, meta, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    dtype = np_dtype(meta.get("dtype", "f64"))
    acc_x = linear_probe(model, dataset, layer_tag=args.layer, use_kd_output=False, dtype=dtype)
    print(f"probe[{args.layer}] input    {acc_x:.4f}")
    has_layer = model.kd_inter if args.layer == "intermediate" else model.kd_penult
    if has_layer is not None:
        acc_xhat = linear_probe(model, dataset, layer_tag=args.layer,
                                use_kd_output=True, dtype=dtype)
        print(f"probe[{args.layer}] residual {acc_xhat:.4f}")
    return 0


def cmd_ablate_alpha(args) -> int:
    cfg = _load_config(args)
    plan = _plan(cfg)
    plan.variant = "kd-both"
    dataset, teacher, labelers = _load_training_inputs(cfg, plan)
    spec = arch_spec(cfg["student"]["arch"], dataset.classes)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = ablate_alpha(plan, dataset, teacher, labelers, spec, seeds=seeds)
    out = _out_dir(cfg)
    path = os.path.join(out, "ablate-alpha.csv")
    with open(path, "w") as f:
        f.write("alpha_inter,alpha_penult,seed,top1\n")
        for r in rows:
            f.write(f"{r['alpha_inter']:.0f},{r['alpha_penult']:.0f},{r['seed']},{r['top1']:.6f}\n")
    print("alpha_inter alpha_penult mean_top1")
    for ai in (0.0, 1.0):
        for ap in (0.0, 1.0):
            vals = [r["top1"] for r in rows
                    if r["alpha_inter"] == ai and r["alpha_penult"] == ap]
            print(f"{ai:10.0f} {ap:12.0f} {np.mean(vals):9.4f}")
    print(f"rows -> {path}")
    return 0


def cmd_export_assignments(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(_require(cfg["data"]["path"], "dataset bundle"))
    model, meta, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if model.kd_penult is None and model.kd_inter is None:
        raise FormatError("checkpoint has no KD layers to export assignments from")
    dtype = np_dtype(meta.get("dtype", "f64"))
    count = args.count
    x = dataset.normalize(dataset.test_images[:count], dtype)
    with no_grad():
        out = model.forward(Tensor(x), mode="eval")
    taps = [(name, p) for name, p in
            (("penultimate", out.p_s_penult), ("intermediate", out.p_s_inter))
            if p is not None]
    lines = ["image point y x id weight"]
    for name, p in taps:
        arr = p.data
        ids = arr.argmax(axis=-1)
        weights = arr.max(axis=-1)
        n, h, w = ids.shape
        for i in range(n):
            for yy in range(h):
                for xx in range(w):
                    lines.append(f"{i} {name} {yy} {xx} {ids[i, yy, xx]} "
                                 f"{weights[i, yy, xx]:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out_file:
        with open(args.out_file + ".tmp", "w") as f:
            f.write(text)
        os.replace(args.out_file + ".tmp", args.out_file)
        print(f"wrote {len(lines) - 1} assignment rows to {args.out_file}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    rng = np.random.default_rng(0)
    # assignment solver vs the iterative oracle
    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(2, 17))
        prob = AssignmentProblem(a=rng.normal(size=k), mu=float(rng.normal(scale=0.5)),
                                 epsilon=float(rng.uniform(0.1, 50.0)))
        p_closed = solve_smooth(prob).p
        p_iter = oracle_smooth(prob).p
        worst = max(worst, float(np.abs(p_closed - p_iter).max()))
    if worst > 1e-6:
        raise NumericalError(f"selftest: smooth solver disagrees with oracle ({worst:.2e})")
    print(f"assignment solver vs oracle: max abs diff {worst:.2e}")

    # hard solutions are extended-simplex vertices
    for _ in range(200):
        k = int(rng.integers(2, 17))
        prob = AssignmentProblem(a=rng.normal(size=k), mu=float(rng.normal(scale=0.5)),
                                 epsilon=1.0)
        sol = solve_hard(prob)
        total = sol.p.sum() + sol.q
        if not (np.isclose(total, 1.0) and set(np.round(sol.p, 12)) <= {0.0, 1.0}):
            raise NumericalError("selftest: hard solution is not a vertex")
    print("hard assignments: vertex property holds")

    # gradient check on the KD layer + KL composite
    layer = init_kd_layer(5, 7, alpha=1.0, mode="explicit_softmax", seed=3)
    x0 = rng.normal(size=(2, 3, 3, 5))
    p_t = rng.dirichlet(np.ones(7), size=(2, 3, 3))

    def f():
        x_hat, p_s = kd_forward(Tensor(x0), layer, mode="train")
        return kd_distill_loss(p_s, p_t)

    checks.check_gradients(f, [t for _, t in layer.parameters()], rel_tol=1e-4)
    print("KD layer + KL gradient check: ok")

    # decision table vs the counting oracle
    for trial in range(5):
        trng = np.random.default_rng(100 + trial)
        c, k = int(trng.integers(2, 5)), int(trng.integers(2, 4))
        n = 400
        y = trng.integers(c, size=n)
        z = trng.normal(size=(n, 6)) + y[:, None]
        lda = fit_lda(z, y, shrinkage=0.1)
        zp = lda.project(z)
        model = fit_subclass_model(zp, y, k, seed=trial)
        oracle = counting_oracle_sT(zp, y, model.prototypes)
        if not np.array_equal(model.s_t, oracle):
            raise NumericalError("selftest: decision table disagrees with counting oracle")
    print("sub-class decision table vs counting oracle: exact")
    print("selftest passed")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="kdkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        return p

    common = {"--seed": dict(type=int, default=None), "--out": dict(type=str, default=None)}

    for name, fn, needs_cfg in [
        ("gen-data", cmd_gen_data, True),
        ("train-teacher", cmd_train_teacher, True),
        ("gen-labels", cmd_gen_labels, True),
        ("train-student", cmd_train_student, True),
        ("eval", cmd_eval, True),
        ("probe", cmd_probe, True),
        ("ablate-alpha", cmd_ablate_alpha, True),
        ("export-assignments", cmd_export_assignments, True),
        ("selftest", cmd_selftest, False),
    ]:
        p = add(name, fn)
        if needs_cfg:
            p.add_argument("--config", required=True)
            for flag, kw in common.items():
                p.add_argument(flag, **kw)
    for name in ("train-student",):
        sub.choices[name].add_argument("--variant", default=None)
    for name in ("eval", "probe", "export-assignments"):
        sub.choices[name].add_argument("--checkpoint", required=True)
    sub.choices["eval"].add_argument("--split", default="test", choices=("train", "test"))
    sub.choices["probe"].add_argument("--layer", default="intermediate",
                                      choices=("intermediate", "penultimate"))
    sub.choices["ablate-alpha"].add_argument("--seeds", default="0,1,2")
    sub.choices["export-assignments"].add_argument("--count", type=int, default=8)
    sub.choices["export-assignments"].add_argument("--out-file", default=None)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
