"""Command-line surface: data generation, bases, schedule fitting, training,
sampling, verification, and schedule/subspace analysis.

Exit codes: 0 success, 1 invariant failure (verify), 2 usage error.
Every output file starts with a provenance header line.  The environment
variable ANISO_THREADS caps internal parallelism (all current kernels are
single-threaded, so it is recorded and enforced trivially).
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .flow_model import FlowModel
from .gmm import posterior_mean, sample_p0
from .persistence import (
    build_family,
    fmt,
    load_gmm,
    load_model,
    load_points_csv,
    load_schedule,
    provenance_line,
    read_csv,
    save_model,
    save_schedule,
    write_csv,
)
from .sampler import SamplerConfig, sample_trajectory
from .schedule import (
    MatrixSchedule,
    eval_M,
    fit_knot_schedule,
    log_linear_schedule,
    weight_to_schedule,
)
from .subspaces import (
    build_dct_basis,
    build_pca_projectors,
    classical_mds,
    mds_stress,
    projector_distance,
)
from .training import TrainConfig, train_bilevel
from .verify import run_checks


def max_threads() -> int:
    value = os.environ.get("ANISO_THREADS")
    if value is None:
        return 1
    n = int(value)
    if n < 1:
        raise ValueError("ANISO_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    gm = load_gmm(args.gmm)
    points = sample_p0(gm, args.n, args.seed)
    header = [
        provenance_line(vars(args), args.seed),
        f"# dim={gm.dim} class={args.class_label if args.class_label else '-'}",
    ]
    write_csv(args.out, [f"x{i}" for i in range(gm.dim)], points, header)
    print(f"wrote {args.n} points to {args.out}")
    return 0


def cmd_basis(args) -> int:
    if args.basis_kind == "dct":
        vectors = build_dct_basis(args.size)
        low = args.low_side if args.low_side is not None else args.size // 2
        if not 1 <= low < args.size:
            raise ValueError("low-side must satisfy 1 <= low_side < size")
        header = [
            provenance_line(vars(args), args.seed),
            f"# dct H={args.size} order=zigzag",
            f"# low_side={low} low_dim={low * low}",
        ]
        write_csv(args.out, [f"c{i}" for i in range(vectors.shape[1])], vectors, header)
        print(f"wrote {vectors.shape[0]} DCT basis vectors to {args.out}")
        return 0
    samples = load_points_csv(args.data)
    family = build_pca_projectors(samples, args.k)
    vectors = np.concatenate([m.basis.T for m in family.members], axis=0)
    header = [
        provenance_line(vars(args), args.seed),
        f"# pca d={samples.shape[1]} k={args.k}",
    ]
    write_csv(args.out, [f"c{i}" for i in range(vectors.shape[1])], vectors, header)
    sidecar = Path(args.out).with_suffix(".meta.json")
    sidecar.write_text(
        json.dumps(
            {
                "eigenvalues": family.meta["eigenvalues"],
                "tie_at_cut": family.meta["tie_at_cut"],
                "k": args.k,
            },
            indent=2,
        )
    )
    print(f"wrote PCA basis to {args.out} (+ {sidecar.name})")
    return 0


def cmd_schedule_fit(args) -> int:
    _, columns, rows = read_csv(args.weight_csv)
    if columns[:2] != ["t", "w"]:
        raise ValueError("weight CSV must have columns t,w")
    t_raw = np.array([float(r[0]) for r in rows])
    w_raw = np.array([float(r[1]) for r in rows])
    if np.any(w_raw <= 0):
        raise ValueError("weight samples must be positive")

    def w_fn(t):
        return np.interp(np.asarray(t, dtype=float), t_raw, w_raw)

    tab = weight_to_schedule(w_fn, args.horizon, args.quad_points)
    # project the tabulated monotone g onto the knot family
    knot = fit_knot_schedule(
        lambda t: tab.eval(t)[0], args.horizon, args.floor, args.knots
    )
    from .subspaces import isotropic_family

    ms = MatrixSchedule(isotropic_family(args.dim), (knot,))
    save_schedule(ms, args.out, seed=args.seed)
    if args.table:
        ts = np.linspace(0.0, args.horizon, 2001)
        g, dg = tab.eval(ts)
        header = [provenance_line(vars(args), args.seed), f"# c={fmt(tab.c)}"]
        write_csv(args.table, ["t", "g", "dg_dt"], np.stack([ts, g, dg], axis=1), header)
    print(f"fit constant c={tab.c:.6g}; wrote schedule to {args.out}")
    return 0


_TRAIN_KEYS = {
    "batch_size", "micro_batches", "lr_model", "lr_schedule_scale",
    "adam_beta1", "adam_beta2", "adam_eps", "warmup_images",
    "ema_half_life_images", "ema_rampup", "total_images",
    "model_steps_per_schedule_step", "midpoint_decay", "train_model",
    "train_schedule", "guard_factor", "guard_patience", "seed", "log_every",
}

_CONFIG_SECTIONS = {"version", "gmm", "data", "family", "schedule", "model", "train"}


def load_run_config(path):
    """Parse and validate a training run config; unknown keys are rejected."""
    path = Path(path)
    cfg = json.loads(path.read_text())
    unknown = set(cfg) - _CONFIG_SECTIONS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if cfg.get("version") != "1":
        raise ValueError("config must declare \"version\": \"1\"")
    if ("gmm" in cfg) == ("data" in cfg):
        raise ValueError("config needs exactly one of 'gmm' or 'data'")
    if "family" not in cfg or "schedule" not in cfg:
        raise ValueError("config needs 'family' and 'schedule' sections")
    train_keys = set(cfg.get("train", {}))
    bad = train_keys - _TRAIN_KEYS
    if bad:
        raise ValueError(f"unknown train keys: {sorted(bad)}")
    base = path.parent
    resolved = dict(cfg)
    for key in ("gmm", "data"):
        if key in cfg:
            resolved[key] = str((base / cfg[key]).resolve())
    return resolved


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    family = build_family(cfg["family"])
    sched_cfg = dict(cfg["schedule"])
    horizon = float(sched_cfg.pop("horizon"))
    floor = float(sched_cfg.pop("floor", 1e-4))
    knots = int(sched_cfg.pop("knots", 16))
    classes = sched_cfg.pop("classes", None)
    if sched_cfg:
        raise ValueError(f"unknown schedule keys: {sorted(sched_cfg)}")
    per = tuple(
        log_linear_schedule(horizon, floor, knots) for _ in range(family.n_subspaces)
    )
    class_table = {label: per for label in classes} if classes else None
    ms = MatrixSchedule(family, per, class_table=class_table)

    train_cfg = TrainConfig(**cfg.get("train", {}))
    if "gmm" in cfg:
        data = load_gmm(cfg["gmm"])
    else:
        data = load_points_csv(cfg["data"])
    model = None
    if "model" in cfg:
        mc = dict(cfg["model"])
        model = FlowModel.create(
            family.ambient_dim, horizon,
            widths=tuple(mc.pop("widths", (64, 64))), seed=mc.pop("seed", 0),
        )
        if mc:
            raise ValueError(f"unknown model keys: {sorted(mc)}")
    elif train_cfg.train_model:
        train_cfg = TrainConfig(**{**cfg.get("train", {}), "train_model": False})

    result = train_bilevel(data, ms, model, train_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_schedule(result.ms, out / "schedule.json", seed=train_cfg.seed)
    if result.model is not None:
        save_model(result.model, out / "model.json")
        save_model(result.ema_model, out / "model_ema.json")
    header = [provenance_line(cfg, train_cfg.seed)]
    columns = list(result.logs[0].keys())
    write_csv(out / "logs.csv", columns, [[r[c] for c in columns] for r in result.logs], header)
    if result.theta_trace:
        rows = [
            [images, "-" if label is None else label] + list(theta)
            for images, label, theta in result.theta_trace
        ]
        ncols = len(result.theta_trace[0][2])
        write_csv(
            out / "theta_trace.csv",
            ["images", "class"] + [f"theta{i}" for i in range(ncols)],
            rows,
            header,
        )
    if result.grad_diagnostics:
        diag_cols = ["images", "class", "coordinate", "explicit", "implicit", "fd_reference"]
        diag_rows = []
        for row in result.grad_diagnostics:
            normalized = dict(row)
            normalized["class"] = "-" if row["class"] is None else row["class"]
            diag_rows.append([normalized[c] for c in diag_cols])
        write_csv(out / "theta_diagnostics.csv", diag_cols, diag_rows, header)
    print(f"training finished after {result.logs[-1]['images']} images; run dir: {out}")
    return 0


def cmd_sample(args) -> int:
    ms = load_schedule(args.schedule)
    if (args.model is None) == (args.oracle is None):
        raise ValueError("need exactly one of --model or --oracle")
    if args.model:
        field = load_model(args.model)
        gm = None
    else:
        gm = load_gmm(args.oracle)
        from .fields import OracleFlowField

        field = OracleFlowField(gm, ms, args.class_label)
    cfg = SamplerConfig(
        steps=args.steps, solver=args.solver, secondary=args.secondary, seed=args.seed
    )
    result = sample_trajectory(ms, field, cfg, n=args.n, rng=args.seed,
                               class_label=args.class_label)
    final = result.final
    if args.denoise:
        if gm is None:
            raise ValueError("--denoise needs the --oracle field")
        final = posterior_mean(gm, final, ms, result.times[0], args.class_label)
    header = [
        provenance_line(vars(args), args.seed),
        f"# dim={ms.family.ambient_dim} nfe={result.nfe} steps={args.steps} "
        f"solver={args.solver} secondary={args.secondary}",
    ]
    write_csv(args.out, [f"x{i}" for i in range(final.shape[1])], final, header)
    if args.dump_trajectory:
        dump = Path(args.dump_trajectory)
        dump.mkdir(parents=True, exist_ok=True)
        for i, state in enumerate(result.states):
            t = result.times[len(result.times) - 1 - i]
            write_csv(
                dump / f"step_{i:04d}.csv",
                [f"x{j}" for j in range(state.shape[1])],
                state,
                [header[0], f"# t={fmt(t)}"],
            )
    print(f"wrote {final.shape[0]} samples to {args.out} (NFE={result.nfe}, "
          f"{result.wall_time:.2f}s)")
    return 0


def cmd_verify(args) -> int:
    checks = run_checks(name_filter=args.filter, quick=args.quick)
    for c in checks:
        print(c.line())
    n_failed = sum(not c.passed for c in checks)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        header = [provenance_line(vars(args), 0)]
        rows = [
            [c.group, c.name, "pass" if c.passed else "fail", c.value, c.threshold, c.seconds]
            for c in checks
        ]
        write_csv(out / "verify_report.csv",
                  ["group", "name", "status", "value", "threshold", "seconds"], rows, header)
        (out / "verify_report.txt").write_text(
            "\n".join([header[0]] + [c.line() for c in checks]) + "\n"
        )
    print(f"{len(checks) - n_failed}/{len(checks)} checks passed")
    return 1 if n_failed else 0


def _schedule_rows(ms, labels, points):
    ts = np.linspace(ms.t_min, ms.horizon, points)
    curves = {}
    for label in labels:
        g, _ = eval_M(ms, ts, label)
        curves[label] = g  # (points, J)
    return ts, curves


def cmd_analyze_schedule(args) -> int:
    ms = load_schedule(args.schedule)
    labels = sorted(ms.class_table) if ms.class_table is not None else [None]
    ts, curves = _schedule_rows(ms, labels, args.points)
    nsub = ms.family.n_subspaces
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = [provenance_line(vars(args), 0)]

    columns = ["t"]
    for label in labels:
        tag = "" if label is None else f"_class_{label}"
        columns += [f"g{j + 1}{tag}" for j in range(nsub)]
        columns.append(f"geomean{tag}")
        if nsub == 2:
            columns.append(f"ratio{tag}")
    rows = []
    for i, t in enumerate(ts):
        row = [t]
        for label in labels:
            g = curves[label][i]
            row += list(g)
            row.append(float(np.exp(np.mean(np.log(g)))))
            if nsub == 2:
                row.append(g[0] / g[1])
        rows.append(row)
    write_csv(out / "schedule_curves.csv", columns, rows, header)

    if ms.class_table is not None:
        # per-class schedules normalized by the geometric mean across classes
        norm_cols = ["t"] + [
            f"g{j + 1}_class_{label}_rel"
            for label in labels
            for j in range(nsub)
        ]
        norm_rows = []
        stacked = np.stack([curves[label] for label in labels])  # (C, points, J)
        gbar = np.exp(np.mean(np.log(stacked), axis=0))  # (points, J)
        for i, t in enumerate(ts):
            row = [t]
            for c, label in enumerate(labels):
                row += list(stacked[c, i] / gbar[i])
            norm_rows.append(row)
        write_csv(out / "class_normalized.csv", norm_cols, norm_rows, header)
    print(f"wrote schedule analysis to {out}")
    return 0


def cmd_analyze_subspaces(args) -> int:
    if len(args.files) < 2:
        raise ValueError("need at least two projector files")
    bases = []
    for path in args.files:
        arr = load_points_csv(path)
        bases.append(arr.T)  # rows in the file are basis vectors
    shape = bases[0].shape
    for path, b in zip(args.files, bases):
        if b.shape != shape:
            raise ValueError(f"{path}: basis shape {b.shape} differs from {shape}")
    n = len(bases)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = projector_distance(bases[i], bases[j])
    emb = classical_mds(dist, 2)
    stress = mds_stress(dist, emb.points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = [provenance_line(vars(args), 0)]
    names = [Path(p).stem for p in args.files]
    write_csv(
        out / "distance_matrix.csv",
        ["name"] + names,
        [[names[i]] + list(dist[i]) for i in range(n)],
        header,
    )
    write_csv(
        out / "mds_embedding.csv",
        ["name", "x", "y"],
        [[names[i], emb.points[i, 0], emb.points[i, 1]] for i in range(n)],
        header + [f"# stress={fmt(stress)} padded={emb.padded}"],
    )
    print(f"wrote subspace analysis to {out} (stress={stress:.3e})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anisodiff",
        description="Learned anisotropic diffusion trajectories at desk scale",
    )
    parser.add_argument("--version", action="version", version=f"anisodiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample points from a mixture file")
    p.add_argument("--gmm", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--class-label", default=None)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("basis", help="construct an orthonormal basis")
    basis_sub = p.add_subparsers(dest="basis_kind", required=True)
    pd = basis_sub.add_parser("dct", help="2-D DCT basis")
    pd.add_argument("--size", type=int, required=True)
    pd.add_argument("--low-side", type=int, default=None)
    pd.add_argument("--seed", type=int, default=0)
    pd.add_argument("--out", required=True)
    pd.set_defaults(handler=cmd_basis)
    pp = basis_sub.add_parser("pca", help="PCA basis from a data CSV")
    pp.add_argument("--data", required=True)
    pp.add_argument("--k", type=int, required=True)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--out", required=True)
    pp.set_defaults(handler=cmd_basis)

    p = sub.add_parser("schedule-fit", help="build a schedule from a weight profile")
    p.add_argument("--weight-csv", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--quad-points", type=int, default=100_001)
    p.add_argument("--knots", type=int, default=16)
    p.add_argument("--floor", type=float, default=1e-4)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--table", default=None)
    p.set_defaults(handler=cmd_schedule_fit)

    p = sub.add_parser("train", help="train schedule and/or model from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", help="integrate the reverse ODE")
    p.add_argument("--schedule", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--oracle", default=None)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--solver", choices=["euler", "heun"], default="heun")
    p.add_argument("--secondary", choices=["endpoint", "midpoint"], default="endpoint")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-trajectory", default=None)
    p.add_argument("--class-label", default=None)
    p.add_argument("--denoise", action="store_true")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--filter", default=None)
    p.add_argument("--quick", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("analyze", help="schedule and subspace analysis outputs")
    analyze_sub = p.add_subparsers(dest="analyze_kind", required=True)
    ps = analyze_sub.add_parser("schedule", help="ratio/geomean curves")
    ps.add_argument("schedule")
    ps.add_argument("--out", required=True)
    ps.add_argument("--points", type=int, default=256)
    ps.set_defaults(handler=cmd_analyze_schedule)
    pu = analyze_sub.add_parser("subspaces", help="projector distances and MDS")
    pu.add_argument("files", nargs="+")
    pu.add_argument("--out", required=True)
    pu.set_defaults(handler=cmd_analyze_subspaces)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses its own exit codes
        return 2 if exc.code not in (0, None) else 0
    try:
        max_threads()
        return args.handler(args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
