"""``evfuse`` command line: fuse, gradcheck, synth, train-toy, infer, eval, perturb-sweep.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 I/O error.

Every command writes a ``*.config.txt`` sidecar holding the resolved
configuration, seed and command line next to its outputs.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractViolation
from .fusion import fuse_maps
from .io import (
    FormatError,
    atomic_write,
    case_dirs,
    format_kv,
    load_config,
    load_model,
    read_case,
    read_pgm,
    read_tensor,
    save_model,
    synth_params_from,
    train_config_from,
    uncertainty_pgm,
    write_case,
    write_pgm,
    write_tensor,
)
from .losses import l_ace, l_dice, l_kl, l_seg, l_up, seg_result
from .metrics import evaluate, reports_csv
from .opinion import alpha_to_opinion
from .tensor import grad_check

log = logging.getLogger("evfuse")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
GRAD_TOL = 1e-4
LOSSES = ("ace", "kl", "dice", "up", "seg")


class UsageError(Exception):
    pass


# helpers ----------------------------------------------------------------------


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, **extra):
    """Resolved config: defaults < --config file < --set < dedicated flags."""
    overrides = _overrides(getattr(args, "set", None))
    overrides.update({k: v for k, v in extra.items() if v is not None})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    path = getattr(args, "config", None)
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"config file {path} not found")
    return load_config(path, overrides)


def _provenance(path, cfg, args):
    record = {"evfuse.version": __version__, "command": " ".join(args.argv)}
    record.update(cfg)
    atomic_write(path, format_kv(record))


def _mask_pgm(mask, C):
    return np.asarray(mask, dtype=np.int64), max(1, C - 1)


def _write_fusion(prefix, fused):
    """Opinion map ``[C+1, H, W]`` (beliefs then u), u PGM, argmax mask PGM, conflict report."""
    b, u = fused.opinion.b, np.asarray(fused.opinion.u)
    C = b.shape[0]
    write_tensor(f"{prefix}.opinion.evf", np.concatenate([b, u[None]]))
    write_pgm(f"{prefix}.u.pgm", uncertainty_pgm(u), 255)
    write_pgm(f"{prefix}.mask.pgm", *_mask_pgm(np.argmax(b + u, axis=0), C))
    atomic_write(f"{prefix}.conflicts.txt", "x,y,normalizer\n" + "".join(
        line + "\n" for line in fused.report_lines()
    ))


# gradcheck --------------------------------------------------------------------


def _gradcheck_point(name, rng):
    """One random evaluation point: (function of a Var, starting array)."""
    C = int(rng.integers(2, 5))
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    labels = rng.integers(0, C, size=shape)
    y = np.eye(C)[labels].transpose(2, 0, 1)
    alpha = 1.0 + rng.uniform(0.05, 6.0, size=(C,) + shape)
    beta = float(rng.uniform(0.01, 1.0))
    if name == "ace":
        return lambda a: l_ace(a, y), alpha
    if name == "kl":
        return lambda a: l_kl(a, y), alpha
    if name == "dice":
        return lambda p: l_dice(p, y), rng.uniform(0.02, 1.0, size=(C,) + shape)
    if name == "up":
        return lambda a: l_up(seg_result(a).p, seg_result(a).u, y), alpha
    if name == "seg":
        return lambda a: l_seg(seg_result(a), y, beta), alpha
    raise UsageError(f"unknown loss {name!r}")


def loss_gradcheck(name, trials, seed):
    """Worst relative gradient error over ``trials`` seeded points and the input that produced it."""
    rng = np.random.Generator(np.random.PCG64(seed))
    worst, worst_x = 0.0, None
    for _ in range(trials):
        f, x = _gradcheck_point(name, rng)
        err = grad_check(f, x)
        if err >= worst:
            worst, worst_x = err, x
    return worst, worst_x


def cmd_gradcheck(args):
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    names = LOSSES if args.loss == "all" else (args.loss,)
    status = EXIT_OK
    for name in names:
        worst, x = loss_gradcheck(name, args.trials, args.seed)
        ok = worst <= GRAD_TOL
        print(f"{name}: max relative error {worst:.3e} over {args.trials} points "
              f"({'ok' if ok else 'FAIL'})")
        if not ok:
            status = EXIT_CHECK
            print(f"  worst input (shape {x.shape}):")
            print(np.array2string(x, precision=17, separator=", "))
    return status


# fuse -------------------------------------------------------------------------


def cmd_fuse(args):
    cfg = _config(args)
    maps = []
    for path in args.inputs:
        e = read_tensor(path)
        if e.ndim != 3:
            raise ContractViolation(f"{path}: evidence map must be [C, H, W], got {e.shape}")
        if (e < 0).any() or not np.isfinite(e).all():
            raise ContractViolation(f"{path}: evidence must be finite and nonnegative")
        maps.append(e)
    if any(m.shape != maps[0].shape for m in maps):
        shapes = ", ".join(str(m.shape) for m in maps)
        raise ContractViolation(f"evidence maps differ in shape: {shapes}")
    opinions = [alpha_to_opinion(e + 1.0) for e in maps]
    fused = fuse_maps(opinions, cfg["fuse.eps_conflict"])
    _write_fusion(args.out, fused)
    _provenance(f"{args.out}.config.txt", cfg, args)
    print(f"fused {len(maps)} maps of shape {maps[0].shape}; "
          f"{len(fused.conflicts)} total-conflict pixels")
    return EXIT_OK


# dataset / training -------------------------------------------------------------


def cmd_synth(args):
    from .synth import generate_dataset

    cfg = _config(args, **{"data.n": args.n, "data.size": args.size})
    n, n_test, size = cfg["data.n"], cfg["data.n_test"], cfg["data.size"]
    if not 0 <= n_test <= n:
        raise ContractViolation("data.n_test must lie in [0, data.n]")
    cases = generate_dataset(n, cfg["seed"], size, size, synth_params_from(cfg),
                             cfg["data.negative_ratio"])
    out = Path(args.out)
    n_train = n - n_test
    for i, case in enumerate(cases):
        split = "train" if i < n_train else "test"
        write_case(out / split / f"case_{i:04d}", case)
    _provenance(out / "config.txt", cfg, args)
    print(f"wrote {n_train} train and {n_test} test cases to {out}")
    return EXIT_OK


def _load_cases(root):
    dirs = case_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"no cases under {root}")
    return [(d.name, read_case(d)) for d in dirs]


def cmd_train_toy(args):
    from .pipeline import train_toy

    cfg = _config(args, **{"train.epochs": args.epochs})
    cfg["train.seed"] = cfg["seed"]
    config = train_config_from(cfg)
    cases = [c for _, c in _load_cases(args.data)]

    def progress(rec):
        log.info("epoch %d/%d loss %.6f", rec["epoch"], config.epochs, rec["loss"])

    model = train_toy(config, cases, progress=progress)
    save_model(args.out, model, extra={"seed": cfg["seed"], "cases": len(cases)})
    _provenance(Path(args.out) / "config.txt", cfg, args)
    print(f"trained {config.epochs} epochs on {len(cases)} cases; "
          f"final loss {model.history[-1]['loss']:.6f}")
    return EXIT_OK


def cmd_infer(args):
    from .pipeline import infer

    cfg = _config(args)
    model = load_model(args.checkpoint)
    out = Path(args.out)
    for name, case in _load_cases(args.data):
        res = infer(model, case, cfg["fuse.eps_conflict"])
        _write_fusion(out / name, res.fused)
    _provenance(out / "config.txt", cfg, args)
    print(f"wrote predictions to {out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    if (args.pred is None) == (args.checkpoint is None):
        raise UsageError("give exactly one of --pred or --checkpoint")
    model = load_model(args.checkpoint) if args.checkpoint else None
    reports = {}
    for name, case in _load_cases(args.data):
        if model is not None:
            from .pipeline import infer

            pred = infer(model, case, cfg["fuse.eps_conflict"]).mask
        else:
            path = Path(args.pred) / f"{name}.mask.pgm"
            if not path.exists():
                path = Path(args.pred) / name / "mask.pgm"
            pred = read_pgm(path)
        reports[name] = evaluate(pred > 0, case.mask > 0)
    atomic_write(args.out, reports_csv(reports))
    _provenance(f"{args.out}.config.txt", cfg, args)
    mean = np.mean([r.dsc for r in reports.values()])
    print(f"{len(reports)} cases, mean DSC {mean:.4f}")
    return EXIT_OK


def cmd_perturb_sweep(args):
    from .pipeline import perturb_sweep
    from .synth import PerturbSpec

    cfg = _config(args)
    try:
        levels = [float(v) for v in args.levels.split(",")]
    except ValueError as exc:
        raise UsageError(f"--levels: {exc}") from exc
    key = "variance" if args.kind == "noise" else "ratio"
    specs = [PerturbSpec(args.kind, **{key: lv}) for lv in levels]
    model = load_model(args.checkpoint)
    cases = [c for _, c in _load_cases(args.data)]
    report = perturb_sweep(model, cases, specs, seed=cfg["seed"])
    rho = "nan" if np.isnan(report.rank_corr) else f"{report.rank_corr:.4f}"
    lines = ["level,mean_dsc,mean_u,rank_corr"] + [
        f"{r.level:.4f},{r.mean_dsc:.4f},{r.mean_u:.6f},{rho}" for r in report.rows
    ]
    atomic_write(args.out, "\n".join(lines) + "\n")
    _provenance(f"{args.out}.config.txt", cfg, args)
    print("\n".join(lines))
    if report.flags:
        print("flags: " + ";".join(report.flags))
    return EXIT_OK


# parser -----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="evfuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="cmd", required=True)

    def with_config(sp, seed=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (default: config 'seed')")
        return sp

    sp = with_config(sub.add_parser("fuse", help="fuse evidence maps with the Dempster-Shafer rule"), seed=False)
    sp.add_argument("inputs", nargs="+", help="evidence maps [C, H, W] as EVF1 tensor files")
    sp.add_argument("--out", required=True, help="output prefix")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("gradcheck", help="check loss gradients against central differences")
    sp.add_argument("--loss", choices=LOSSES + ("all",), default="all")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = with_config(sub.add_parser("synth", help="write a synthetic CT/PET dataset"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, help="number of cases (config data.n)")
    sp.add_argument("--size", type=int, help="image side (config data.size)")
    sp.set_defaults(func=cmd_synth)

    sp = with_config(sub.add_parser("train-toy", help="train the evidential heads"))
    sp.add_argument("--data", required=True, help="directory of cases")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_toy)

    sp = with_config(sub.add_parser("infer", help="fused opinion maps for every case"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = with_config(sub.add_parser("eval", help="metrics CSV against the ground-truth masks"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--pred", help="directory of predicted masks (<case>.mask.pgm)")
    sp.add_argument("--checkpoint", help="predict with this checkpoint instead")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("perturb-sweep", help="DSC and uncertainty under perturbation"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--kind", choices=("noise", "mask"), default="noise")
    sp.add_argument("--levels", default="0,0.1,0.2,0.3")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_perturb_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"evfuse {args.cmd}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"evfuse {args.cmd}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractViolation, ValueError) as exc:
        print(f"evfuse {args.cmd}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
