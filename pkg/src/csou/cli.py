"""Command-line interface.

Subcommands: gen (synthesize a dataset), solve (run a reconstruction method
over a dataset and score it), train (fit the unfolded network), eval (score
previously written reconstructions), bench (compare all methods).

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every flag can also
be supplied through ``--config FILE`` (``key = value`` lines, ``#`` comments);
precedence is defaults < config file < explicit flags.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import dataset as ds
from . import evaluation as ev
from . import network as nw
from . import solvers
from . import training as tr
from .scene import SceneConfig


def _scene_args(p):
    p.add_argument("--m1", type=int, default=11, help="observed rows")
    p.add_argument("--m2", type=int, default=11, help="observed cols")
    p.add_argument("--upscale", type=int, default=3, help="sub-pixel factor c")
    p.add_argument("--sigma-psf", type=float, default=0.75, help="PSF width in observed px")


def _scene_from(args):
    return SceneConfig(m1=args.m1, m2=args.m2, c=args.upscale, sigma_psf=args.sigma_psf)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csou",
        description="Unmix closely spaced point sources from low-resolution spots.",
    )
    parser.add_argument("--version", action="version", version="csou %s" % __version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    subparsers = {}

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", help="file stem, e.g. train or eval")
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--s-lo", type=float, default=100.0, help="min target intensity")
    p.add_argument("--s-hi", type=float, default=255.0, help="max target intensity")
    p.add_argument("--margin", type=float, default=2.0, help="border keep-out in px")
    p.add_argument("--min-separation", type=float, default=0.5)
    p.add_argument("--noise-sigma", type=float, default=2.0)
    p.add_argument("--csv", action="store_true", help="also write ground-truth CSV")
    _scene_args(p)
    p.set_defaults(func=cmd_gen)
    subparsers["gen"] = p

    p = sub.add_parser("solve", help="reconstruct a dataset with one method")
    p.add_argument("--dataset", required=True, help="path to a .csou file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--method", required=True, choices=("ista", "admm", "dscsnet"))
    p.add_argument("--lam", type=float, default=0.05, help="l1 weight")
    p.add_argument("--rho", type=float, default=0.01, help="penalty weight")
    p.add_argument("--step", type=float, default=None, help="ista step (default 0.99/L)")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--variant", choices=("prox", "gradient"), default="prox")
    p.add_argument("--checkpoint", help="trained parameters (dscsnet only)")
    p.add_argument("--extended-deltas", action="store_true",
                   help="score with match radii 0.05..0.50")
    p.set_defaults(func=cmd_solve)
    subparsers["solve"] = p

    p = sub.add_parser("train", help="train the unfolded network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip", type=float, default=10.0, help="gradient norm limit")
    p.add_argument("--stages", type=int, default=6)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--bases", type=int, default=4, help="dynamic-conv basis kernels")
    p.add_argument("--hidden", type=int, default=8, help="attention MLP width")
    p.add_argument("--history", type=int, default=3, help="iterates fused by the head")
    p.add_argument("--dir-pos", type=int, default=3,
                   help="first stage eligible for history fusion")
    p.add_argument("--dyn-weight", type=float, default=0.7,
                   help="dynamic/static kernel blend")
    p.add_argument("--ckpt-interval", type=int, default=0,
                   help="epochs between snapshots (0 = final only)")
    p.set_defaults(func=cmd_train)
    subparsers["train"] = p

    p = sub.add_parser("eval", help="score reconstructions already on disk")
    p.add_argument("--dataset", required=True)
    p.add_argument("--recon-dir", required=True, help="directory of recon_*.npy files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--method-name", default="method", help="label used in reports")
    p.add_argument("--extended-deltas", action="store_true")
    p.add_argument("--svg", action="store_true", help="also write a PR-curve SVG")
    p.set_defaults(func=cmd_eval)
    subparsers["eval"] = p

    p = sub.add_parser("bench", help="compare ista, admm and dscsnet on one dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--lam", type=float, default=0.05)
    p.add_argument("--rho", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--extended-deltas", action="store_true")
    p.set_defaults(func=cmd_bench)
    subparsers["bench"] = p

    return parser, subparsers


def _read_config_file(path):
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key = value" % (path, ln))
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    return values


def _apply_config(sub_parser, args, argv):
    """Overlay config-file values under explicit command-line flags."""
    if not getattr(args, "config", None):
        return
    try:
        values = _read_config_file(args.config)
    except (OSError, ValueError) as e:
        sub_parser.error(str(e))
    actions = {
        a.dest: a
        for a in sub_parser._actions
        if a.option_strings and a.dest not in ("help", "config")
    }
    explicit = set()
    for a in actions.values():
        for opt in a.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                explicit.add(a.dest)
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            sub_parser.error("unknown config key %r in %s" % (key, args.config))
        if dest in explicit:
            continue
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0"):
                sub_parser.error("config key %r wants true/false" % key)
            setattr(args, dest, raw.lower() in ("true", "1"))
            continue
        if action.choices and raw not in action.choices:
            sub_parser.error(
                "config key %r: %r is not one of %s" % (key, raw, sorted(action.choices))
            )
        try:
            setattr(args, dest, (action.type or str)(raw))
        except ValueError:
            sub_parser.error("config key %r: cannot parse %r" % (key, raw))


def _thread_count():
    raw = os.environ.get("CSOU_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError("CSOU_THREADS must be an integer, got %r" % raw)
    if n < 1:
        raise ValueError("CSOU_THREADS must be at least 1")
    return n


def cmd_gen(args, parser):
    try:
        cfg = ds.DatasetConfig(
            scene=_scene_from(args),
            k_min=args.k_min,
            k_max=args.k_max,
            s_lo=args.s_lo,
            s_hi=args.s_hi,
            margin=args.margin,
            min_separation=args.min_separation,
            noise_sigma=args.noise_sigma,
            count=args.count,
            seed=args.seed,
            split=args.split,
        )
    except ValueError as e:
        parser.error(str(e))
    path = ds.generate_dataset(cfg, args.out)
    print("wrote %d records to %s" % (cfg.count, path))
    if args.csv:
        _, records = ds.load_dataset(path)
        csv_path = os.path.join(args.out, "%s.truth.csv" % args.split)
        ds.export_csv(records, csv_path)
        print("wrote %s" % csv_path)
    return 0


def _deltas(args):
    return ev.DELTAS_EXTENDED if args.extended_deltas else ev.DELTAS_DEFAULT


def _solve_classic(method, records, scene, cfg, threads):
    op = solvers.forward_operator(scene)
    op.lipschitz()  # materialize shared caches before threading
    op.solve_regularized(np.zeros(op.shape[1]), cfg.rho)
    shape = (scene.n1, scene.n2)
    run = solvers.ista_solve if method == "ista" else solvers.admm_solve

    def one(rec):
        return run(rec.y.astype(np.float64), cfg, op, shape)

    if threads == 1:
        results = [one(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, records))
    print("iterations: min=%d max=%d"
          % (min(r.iterations for r in results), max(r.iterations for r in results)))
    return [r.grid for r in results]


def _solve_net(checkpoint, records, scene):
    params = nw.load_checkpoint(checkpoint)
    got = params.cfg.scene
    if (got.m1, got.m2, got.c) != (scene.m1, scene.m2, scene.c):
        raise ValueError(
            "checkpoint geometry %dx%d/c=%d does not match dataset %dx%d/c=%d"
            % (got.m1, got.m2, got.c, scene.m1, scene.m2, scene.c)
        )
    ys = np.stack([r.y for r in records]).astype(np.float32)
    grids = []
    for lo in range(0, len(records), 32):
        out = nw.net_forward(params, ys[lo : lo + 32])
        grids.extend(np.asarray(out.data[:, 0], dtype=np.float64))
    return grids


def _write_recons(out_dir, grids):
    os.makedirs(out_dir, exist_ok=True)
    for i, g in enumerate(grids):
        np.save(os.path.join(out_dir, "recon_%05d.npy" % i), np.asarray(g, dtype=np.float32))


def _report(grids, records, scene, deltas, label, out_dir, svg=False):
    rep = ev.evaluate_grids(grids, [r.scene for r in records], scene.c,
                            deltas=deltas, method=label)
    os.makedirs(out_dir, exist_ok=True)
    ev.write_report_csv([rep], os.path.join(out_dir, "report.csv"))
    ev.write_report_json([rep], os.path.join(out_dir, "report.json"))
    if svg:
        ev.write_pr_svg(rep, os.path.join(out_dir, "pr_curves.svg"))
    return rep


def _print_report_line(rep):
    cols = " ".join("ap%02d=%.4f" % (round(d * 100), a) for d, a in zip(rep.deltas, rep.ap))
    print("%-8s %s cso-map=%.4f" % (rep.method, cols, rep.cso_map))


def cmd_solve(args, parser):
    if args.method == "dscsnet" and not args.checkpoint:
        parser.error("--method dscsnet requires --checkpoint")
    header, records = ds.load_dataset(args.dataset)
    scene = header.scene_config()
    if args.method == "dscsnet":
        grids = _solve_net(args.checkpoint, records, scene)
    else:
        cfg = solvers.SolverConfig(
            lam=args.lam, rho=args.rho, step=args.step,
            max_iters=args.iters, tol=args.tol, variant=args.variant,
        )
        grids = _solve_classic(args.method, records, scene, cfg, _thread_count())
    _write_recons(args.out, grids)
    rep = _report(grids, records, scene, _deltas(args), args.method, args.out)
    print("solved %d samples with %s" % (len(records), args.method))
    _print_report_line(rep)
    return 0


def cmd_train(args, parser):
    header, records = ds.load_dataset(args.dataset)
    try:
        net_cfg = nw.NetConfig(
            scene=header.scene_config(),
            n_stages=args.stages,
            channels=args.channels,
            n_bases=args.bases,
            mlp_hidden=args.hidden,
            alpha=args.dyn_weight,
            history=args.history,
            dir_pos=args.dir_pos,
        )
        train_cfg = tr.TrainConfig(
            epochs=args.epochs, batch_size=args.batch, lr=args.lr,
            seed=args.seed, clip_norm=args.clip,
            checkpoint_interval=args.ckpt_interval,
        )
    except ValueError as e:
        parser.error(str(e))
    params = nw.init_params(net_cfg, seed=args.seed)
    ys, targets = tr.prepare_arrays(records, net_cfg.scene)
    os.makedirs(args.out, exist_ok=True)

    def progress(epoch, mean_loss):
        print("epoch %d: loss %.6g" % (epoch, mean_loss))
        sys.stdout.flush()

    tr.train(params, ys, targets, train_cfg,
             log_path=os.path.join(args.out, "loss.csv"),
             ckpt_dir=args.out, progress=progress)
    print("wrote %s" % os.path.join(args.out, "checkpoint.csoc"))
    return 0


def cmd_eval(args, parser):
    header, records = ds.load_dataset(args.dataset)
    scene = header.scene_config()
    grids = []
    for i in range(len(records)):
        path = os.path.join(args.recon_dir, "recon_%05d.npy" % i)
        if not os.path.exists(path):
            raise FileNotFoundError("missing reconstruction %s" % path)
        grids.append(np.load(path).astype(np.float64))
    rep = _report(grids, records, scene, _deltas(args), args.method_name,
                  args.out, svg=args.svg)
    _print_report_line(rep)
    return 0


def cmd_bench(args, parser):
    header, records = ds.load_dataset(args.dataset)
    scene = header.scene_config()
    threads = _thread_count()
    cfg = solvers.SolverConfig(lam=args.lam, rho=args.rho, max_iters=args.iters)
    deltas = _deltas(args)
    reports = []
    for method in ("ista", "admm", "dscsnet"):
        if method == "dscsnet":
            grids = _solve_net(args.checkpoint, records, scene)
        else:
            grids = _solve_classic(method, records, scene, cfg, threads)
        rep = ev.evaluate_grids(grids, [r.scene for r in records], scene.c,
                                deltas=deltas, method=method)
        reports.append(rep)
    os.makedirs(args.out, exist_ok=True)
    ev.write_report_csv(reports, os.path.join(args.out, "report.csv"))
    ev.write_report_json(reports, os.path.join(args.out, "report.json"))
    header_cols = " ".join("%8s" % ("ap%02d" % round(d * 100)) for d in deltas)
    print("%-8s %s %10s" % ("method", header_cols, "cso-map"))
    for rep in reports:
        cols = " ".join("%8.4f" % a for a in rep.ap)
        print("%-8s %s %10.4f" % (rep.method, cols, rep.cso_map))
    return 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    sub = subparsers[args.command]
    _apply_config(sub, args, argv)
    try:
        return args.func(args, sub)
    except Exception as e:  # runtime failures map to exit 1
        print("error: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
