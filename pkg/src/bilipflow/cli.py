"""Command-line driver wiring the modules into reproducible experiments.

Subcommands: construct, rate-study, pde-gen, pca, train, eval, verify.
Exit codes: 0 success, 1 runtime failure, 2 usage error.  The default seed
can be overridden with the INN_SEED environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import constructor, lifted, maps, neural, pca, pde
from .constructor import ConstructedMap, ConstructionError, GridDataset

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _default_seed() -> int:
    env = os.environ.get("INN_SEED")
    return int(env) if env else 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=_default_seed(),
                   help="global seed (default 0, or INN_SEED)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads where a step parallelizes")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded execution")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bilipflow",
        description="invertible-coupling constructions, certificates, and the PDE surrogate pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("construct", help="build an interpolating invertible map from grid data")
    p.add_argument("--grid", required=True, help="grid data JSON ({d, n, y})")
    p.add_argument("--eps", type=float, required=True, help="interpolation tolerance")
    p.add_argument("--r", type=float, default=None, help="snap sharpness in (0,1); default: chosen from the certificate")
    p.add_argument("--lifted", action="store_true", help="use the exact lifted construction")
    p.add_argument("--no-snap", action="store_true", help="skip the snap prefix entirely")
    p.add_argument("--out", required=True, help="output model JSON")
    _add_common(p)

    p = sub.add_parser("rate-study", help="empirical error vs grid resolution for a built-in map")
    p.add_argument("--fn", default="sin-shear", help="built-in map: sin-shear | random-bilip")
    p.add_argument("--dims", type=int, nargs="+", default=[2])
    p.add_argument("--n-list", type=int, nargs="+", default=[4, 8, 16, 32])
    p.add_argument("--c-eps", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--plot", default=None, help="optional SVG path for the rate chart")
    _add_common(p)

    p = sub.add_parser("pde-gen", help="generate the elliptic-PDE dataset")
    p.add_argument("--m", type=int, default=2000, help="number of records (paper-scale: 10000)")
    p.add_argument("--h", type=float, default=1.0 / 50.0)
    p.add_argument("--out", required=True, help="output prefix (.json/.bin)")
    _add_common(p)

    p = sub.add_parser("pca", help="fit input/output bases on a dataset split")
    p.add_argument("--data", required=True, help="dataset prefix")
    p.add_argument("--d", type=int, default=10, help="truncation level")
    p.add_argument("--train-count", type=int, default=None,
                   help="fit on the first K records (default: all)")
    p.add_argument("--out", required=True, help="output prefix (writes <out>_x, <out>_y)")
    _add_common(p)

    p = sub.add_parser("train", help="train the coupling network on encoded data")
    p.add_argument("--data", required=True)
    p.add_argument("--bases", required=True, help="prefix produced by the pca subcommand")
    p.add_argument("--train-count", type=int, required=True)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--c0", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--out", required=True, help="checkpoint prefix; metrics CSV at <out>_metrics.csv")
    p.add_argument("--plot", default=None, help="optional SVG path for error curves")
    _add_common(p)

    p = sub.add_parser("eval", help="report e_a/e_g for a checkpoint (optionally an FNN baseline)")
    p.add_argument("--data", required=True)
    p.add_argument("--bases", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-count", type=int, required=True)
    p.add_argument("--fnn", action="store_true", help="also train/evaluate the per-direction baseline")
    p.add_argument("--fnn-steps", type=int, default=5000)
    _add_common(p)

    p = sub.add_parser("verify", help="run the invariant suite against a serialized model")
    p.add_argument("--model", required=True)
    p.add_argument("--probes", type=int, default=1000)
    _add_common(p)

    return parser


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def cmd_construct(args) -> int:
    try:
        with open(args.grid) as fh:
            data = GridDataset.from_json(fh.read())
    except (OSError, ConstructionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    if args.lifted:
        lmap = lifted.construct_f_nn_lifted(data)
        with open(args.out, "w") as fh:
            fh.write(lmap.to_json())
        counts = lmap.layer_counts()
        print(f"max interpolation residual: {lmap.metadata['max_interpolation_residual']:.3e}")
        print(f"layers: {counts['per_variant']}")
        print(f"coupling accounting: {counts['weight_layers']} weight / {counts['added_layers']} added")
        print(f"certificate product (both directions): {lmap.certificate_product:.6g}")
        return 0
    cmap = constructor.construct_f_nn(data, args.eps)
    if not args.no_snap:
        r = args.r if args.r is not None else constructor.choose_r(
            cmap.certificate, data.n, data.d
        )
        cmap = constructor.compose_with_snap(cmap, r)
    with open(args.out, "w") as fh:
        fh.write(cmap.to_json())
    counts = cmap.layer_counts()
    cert = cmap.certificate
    print(f"max interpolation residual: {cmap.metadata['max_interpolation_residual']:.3e} (eps {args.eps:g})")
    print(f"layers: {counts['per_variant']}")
    print(f"coupling accounting: {counts['weight_layers']} weight / {counts['added_layers']} added")
    if cmap.r is not None:
        print(f"snap sharpness r: {cmap.r:.17g}")
    print(f"certificate: c = {cert.c:.6g}, eps = {cert.epsilon:.6g}")
    for s in cert.per_stage:
        print(f"  stage {s.name}: forward {s.forward:.6g}, inverse {s.inverse:.6g}")
    print(f"  product forward {cert.product_forward:.6g}, inverse {cert.product_inverse:.6g}")
    print(f"  data Lipschitz estimates: F {cert.lip_f:.6g}, F^-1 {cert.lip_f_inv:.6g} (lower bounds)")
    return 0


def cmd_rate_study(args) -> int:
    lines = ["n,err_fwd,err_inv,bound_fwd,bound_inv,slope"]
    slopes = []
    for d in args.dims:
        true_map = maps.builtin_map(args.fn, d=d, seed=args.seed)
        rows, slope = constructor.rate_study(
            true_map, args.n_list, c_eps=args.c_eps, samples=args.samples, seed=args.seed
        )
        slopes.append((d, slope))
        for row in rows:
            lines.append(
                f"{row.n},{row.err_fwd:.17g},{row.err_inv:.17g},"
                f"{row.bound_fwd:.17g},{row.bound_inv:.17g},{slope:.17g}"
            )
        print(f"d = {d}: fitted forward log-log slope {slope:.4f}")
        for row in rows:
            print(
                f"  n = {row.n:4d}: err_fwd {row.err_fwd:.4e} <= bound {row.bound_fwd:.4e}, "
                f"err_inv {row.err_inv:.4e} <= bound {row.bound_inv:.4e}"
            )
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if args.plot:
        _plot_rate(args.plot, args.n_list, lines)
    return 0


def _plot_rate(path, n_list, csv_lines):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    rows = [line.split(",") for line in csv_lines[1:]]
    ns = [int(r[0]) for r in rows]
    err = [float(r[1]) for r in rows]
    bound = [float(r[3]) for r in rows]
    fig, ax = plt.subplots()
    ax.loglog(ns, err, "o-", label="empirical forward error")
    ax.loglog(ns, bound, "s--", label="bound")
    ax.set_xlabel("n")
    ax.set_ylabel("L2 error")
    ax.legend()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_pde_gen(args) -> int:
    spec = pde.SolveSpec(h=args.h)
    threads = 1 if args.deterministic else max(1, args.threads)
    manifest = pde.generate(args.m, args.seed, spec, args.out, threads=threads)
    print(f"wrote {manifest['M']} records to {args.out}.bin "
          f"(grid {spec.nodes_per_side}^2, {manifest['rejections']} rejections)")
    return 0


def _load_split(data_prefix: str, train_count: int | None):
    xi, y, manifest = pde.load_dataset(data_prefix)
    x_repr = pde.weighted_inputs(xi)
    if train_count is None:
        train_count = len(xi)
    if not (1 <= train_count <= len(xi)):
        raise ValueError(f"train count {train_count} out of range")
    return x_repr, y, manifest, train_count


def cmd_pca(args) -> int:
    x_repr, y, _, train_count = _load_split(args.data, args.train_count)
    basis_x = pca.fit(x_repr[:train_count], args.d)
    basis_y = pca.fit(y[:train_count], args.d)
    basis_x.save(args.out + "_x")
    basis_y.save(args.out + "_y")
    wx, wy = basis_x.weight_vector(), basis_y.weight_vector()
    print(f"fitted on {train_count} records, truncation d = {args.d}")
    print(f"input basis:  top-{args.d} energy fraction {basis_x.energy_fraction():.6f}")
    print(f"output basis: top-{args.d} energy fraction {basis_y.energy_fraction():.6f}")
    print(f"w_u = {np.array2string(wx, precision=4)}")
    print(f"w_y = {np.array2string(wy, precision=4)}")
    report = pca.tail_bound_report(basis_x, basis_y, 1.0, 1.0, train_count)
    print(f"tail sums: input {report['tail_x']:.4e}, output {report['tail_y']:.4e}")
    return 0


def _encode_all(basis_x, basis_y, x_repr, y):
    return basis_x.encode(x_repr), basis_y.encode(y)


def cmd_train(args) -> int:
    x_repr, y, _, train_count = _load_split(args.data, args.train_count)
    basis_x = pca.PCABasis.load(args.bases + "_x")
    basis_y = pca.PCABasis.load(args.bases + "_y")
    u_enc, y_enc = _encode_all(basis_x, basis_y, x_repr, y)
    w_u, w_y = basis_x.weight_vector(), basis_y.weight_vector()
    cfg = neural.TrainConfig(
        c0=args.c0,
        learning_rate=args.lr,
        max_steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    model = neural.init_model(
        dim=basis_x.d_u, hidden=args.hidden, n_blocks=args.blocks, seed=args.seed
    )
    result = neural.train(
        model,
        u_enc[:train_count], y_enc[:train_count],
        u_enc[train_count:], y_enc[train_count:],
        cfg, w_u, w_y,
    )
    neural.save_checkpoint(result.best_model, args.out, cfg, step=result.steps_run)
    with open(args.out + "_metrics.csv", "w") as fh:
        fh.write(result.metrics.to_csv())
    print(f"trained {result.steps_run} steps on {train_count} records")
    print(f"best e_g forward {result.metrics.best('e_g_fwd'):.4e}, "
          f"inverse {result.metrics.best('e_g_inv'):.4e}")
    if args.plot:
        _plot_metrics(args.plot, result.metrics)
    return 0


def _plot_metrics(path, metrics):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    steps = metrics.series("step")
    fig, ax = plt.subplots()
    for key in ("e_a_fwd", "e_g_fwd", "e_a_inv", "e_g_inv"):
        ax.semilogy(steps, metrics.series(key), label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("relative error")
    ax.legend()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_eval(args) -> int:
    x_repr, y, _, train_count = _load_split(args.data, args.train_count)
    basis_x = pca.PCABasis.load(args.bases + "_x")
    basis_y = pca.PCABasis.load(args.bases + "_y")
    u_enc, y_enc = _encode_all(basis_x, basis_y, x_repr, y)
    w_u, w_y = basis_x.weight_vector(), basis_y.weight_vector()
    model = neural.load_checkpoint(args.ckpt)
    tr = slice(0, train_count)
    te = slice(train_count, None)
    e_a_fwd, e_a_inv = neural.relative_errors(model, u_enc[tr], y_enc[tr], w_u, w_y)
    e_g_fwd, e_g_inv = neural.relative_errors(model, u_enc[te], y_enc[te], w_u, w_y)
    print(f"|T_r| = {train_count}, |T_e| = {len(u_enc) - train_count}")
    print("model      direction   e_a         e_g")
    print(f"coupling   forward     {e_a_fwd:.3e}  {e_g_fwd:.3e}")
    print(f"coupling   inverse     {e_a_inv:.3e}  {e_g_inv:.3e}")
    if args.fnn:
        for direction, src, dst, w in (
            ("forward", u_enc, y_enc, w_y),
            ("inverse", y_enc, u_enc, w_u),
        ):
            fnn = neural.init_fnn(dim=basis_x.d_u, seed=args.seed)
            neural.train_fnn(fnn, src[tr], dst[tr], w, steps=args.fnn_steps)
            num_a = np.sum(((dst[tr] - fnn.forward(src[tr])) * w) ** 2)
            num_g = np.sum(((dst[te] - fnn.forward(src[te])) * w) ** 2)
            e_a = float(np.sqrt(num_a / np.sum((dst[tr] * w) ** 2)))
            e_g = float(np.sqrt(num_g / np.sum((dst[te] * w) ** 2)))
            print(f"fnn        {direction:<11} {e_a:.3e}  {e_g:.3e}")
    return 0


def cmd_verify(args) -> int:
    with open(args.model) as fh:
        text = fh.read()
    import json as _json

    kind = _json.loads(text).get("kind")
    rng = np.random.Generator(np.random.Philox(key=args.seed))
    failures = []
    if kind == "constructed_map":
        cmap = ConstructedMap.from_json(text)
        d = cmap.metadata["d"]
        probes = rng.uniform(-0.5, 1.5, size=(args.probes, d))
        rt = np.max(np.abs(cmap.exact_inverse(cmap.forward(probes)) - probes))
        print(f"round-trip max residual: {rt:.3e}")
        if rt > 1e-9 * (1.0 + np.max(np.abs(probes))):
            failures.append("round-trip")
        ratio = constructor.empirical_lipschitz_ratio(
            cmap.interpolator_forward, d, 10000, args.seed
        )
        print(f"empirical forward ratio {ratio:.6g} vs certificate "
              f"{cmap.certificate.product_forward:.6g}")
        if ratio > cmap.certificate.product_forward:
            failures.append("forward certificate")
        ratio_inv = constructor.empirical_lipschitz_ratio(
            cmap.interpolator_inverse, d, 10000, args.seed + 1
        )
        print(f"empirical inverse ratio {ratio_inv:.6g} vs certificate "
              f"{cmap.certificate.product_inverse:.6g}")
        if ratio_inv > cmap.certificate.product_inverse:
            failures.append("inverse certificate")
    elif kind == "lifted_map":
        lmap = lifted.LiftedMap.from_json(text)
        d = lmap.metadata["d"]
        probes = rng.uniform(-0.5, 1.5, size=(args.probes, d))
        rt = np.max(np.abs(lmap.round_trip(probes) - probes))
        print(f"round-trip max residual (full-state path): {rt:.3e}")
        if rt > 1e-9 * (1.0 + np.max(np.abs(probes))):
            failures.append("round-trip")
    else:
        print(f"error: unknown model kind {kind!r}", file=sys.stderr)
        return USAGE_ERROR
    if failures:
        print(f"FAILED checks: {', '.join(failures)}")
        return RUNTIME_ERROR
    print("all checks passed")
    return 0


_COMMANDS = {
    "construct": cmd_construct,
    "rate-study": cmd_rate_study,
    "pde-gen": cmd_pde_gen,
    "pca": cmd_pca,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConstructionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
