"""Command-line entry point: simulate, train, restore, eval, selftest."""

from __future__ import annotations

import argparse
import logging
import os
import sys

logger = logging.getLogger("afflow")


def _apply_thread_cap():
    """AFFLOW_THREADS caps BLAS parallelism; must run before numpy loads."""
    cap = os.environ.get("AFFLOW_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afflow",
        description="Simulate MRI motion artifacts, train the conditional flow "
                    "restorer, restore corrupted images, and evaluate results.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_key: bool = True):
        p.add_argument("--config", metavar="PATH", help="run config file")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        if seed_key:
            p.add_argument("--seed", type=int, metavar="N", help="override the run seed")

    p_sim = sub.add_parser("simulate", help="generate a paired (corrupt, clean) dataset")
    common(p_sim)
    p_sim.add_argument("--clean-dir", metavar="DIR",
                       help="directory of clean PGM images (default: synthesize phantoms)")
    p_sim.add_argument("--count", type=int, help="number of phantoms to synthesize")
    p_sim.add_argument("--amplitude", type=float,
                       help="fix the displacement amplitude in pixels")
    p_sim.add_argument("--fraction", type=float, help="corrupted fraction of k-space lines")
    p_sim.add_argument("--side", type=int, help="image side (power of two)")
    p_sim.add_argument("--variants", type=int, help="corrupted variants per clean image")
    p_sim.add_argument("--kind", choices=["sinusoidal-respiratory", "rigid-constant"])

    p_train = sub.add_parser("train", help="train the flow on a simulated dataset")
    common(p_train)
    p_train.add_argument("--data", metavar="DIR", required=True, help="dataset directory")
    p_train.add_argument("--iters", type=int, help="training iterations")
    p_train.add_argument("--batch", type=int)
    p_train.add_argument("--lambda0", type=float, help="base coupling coefficient")
    p_train.add_argument("--decay-a", type=float, help="coupling decay factor per step")
    p_train.add_argument("--levels", type=int, metavar="L")
    p_train.add_argument("--steps", type=int, metavar="K")
    p_train.add_argument("--hidden", type=int, metavar="C", help="coupling subnet width")
    p_train.add_argument("--resume", metavar="CKPT", help="checkpoint to resume from")

    p_restore = sub.add_parser("restore", help="restore every corrupted image in a dataset")
    common(p_restore)
    p_restore.add_argument("--data", metavar="DIR", required=True)
    p_restore.add_argument("--checkpoint", metavar="PATH", required=True)
    p_restore.add_argument("--tau", type=float, help="sampling temperature (0 = prior mean)")

    p_eval = sub.add_parser("eval", help="score restored (or corrupted) images against clean")
    common(p_eval, seed_key=False)
    p_eval.add_argument("--data", metavar="DIR", required=True)
    p_eval.add_argument("--restored", metavar="DIR",
                        help="directory of *_restored.aft (default: score the corrupted inputs)")

    sub.add_parser("selftest", help="run the built-in property suite")
    return parser


def _load_config(args, overrides: dict[str, object]):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key, value in overrides.items():
        if value is not None:
            cfg.set(key, value)
    return cfg


def _cmd_simulate(args) -> int:
    from pathlib import Path

    from .config import RunConfig
    from .dataset import generate_phantom_dir, make_dataset

    overrides = {
        "sim.count": args.count, "sim.fraction": args.fraction,
        "sim.side": args.side, "sim.variants": args.variants,
        "sim.kind": args.kind, "sim.seed": args.seed,
    }
    cfg = _load_config(args, overrides)
    if args.amplitude is not None:
        cfg.set("sim.amplitude_min", args.amplitude)
        cfg.set("sim.amplitude_max", args.amplitude)
    sim = cfg.sim_config()

    out = Path(args.out)
    if args.clean_dir:
        clean_dir = Path(args.clean_dir)
    else:
        clean_dir = generate_phantom_dir(out / "phantoms", cfg.get("sim.count"),
                                         sim.side, sim.seed)
    ids = make_dataset(clean_dir, sim, out)
    cfg.write_resolved(out)
    logger.info("wrote %d pairs to %s", len(ids), out)
    return 0


def _cmd_train(args) -> int:
    from pathlib import Path

    from .checkpoint import read_checkpoint
    from .dataset import load_pairs
    from .model import ArtifactFlowModel
    from .report import plot_loss_csv
    from .training import LOSS_LOG_NAME, train

    overrides = {
        "train.iters": args.iters, "train.batch": args.batch,
        "flow.lambda0": args.lambda0, "flow.decay_a": args.decay_a,
        "flow.levels": args.levels, "flow.steps": args.steps,
        "flow.hidden": args.hidden, "train.seed": args.seed,
    }
    cfg = _load_config(args, overrides)
    out = Path(args.out)

    _, corrupt, clean = load_pairs(args.data)
    if args.resume:
        from .checkpoint import load_model

        model, meta, arrays = load_model(args.resume)
        result = train(model, corrupt, clean, cfg.train_config(), out,
                       resume_meta=meta, resume_arrays=arrays)
    else:
        model = ArtifactFlowModel(cfg.model_config())
        result = train(model, corrupt, clean, cfg.train_config(), out)

    plot_loss_csv(out / LOSS_LOG_NAME, out / "loss_curve.png")
    cfg.write_resolved(out)
    logger.info("finished at step %d, checkpoint %s", cfg.get("train.iters"),
                result.checkpoint_path)
    return 0


def _cmd_restore(args) -> int:
    from pathlib import Path

    from .training import restore_directory

    cfg = _load_config(args, {"restore.tau": args.tau, "restore.seed": args.seed})
    out = Path(args.out)
    ids = restore_directory(args.checkpoint, args.data, out,
                            tau=cfg.get("restore.tau"), seed=cfg.get("restore.seed"))
    cfg.write_resolved(out)
    logger.info("restored %d images to %s", len(ids), out)
    return 0


def _cmd_eval(args) -> int:
    from pathlib import Path

    import numpy as np

    from .aft import read_aft
    from .dataset import load_pairs
    from .metrics import evaluate_pairs
    from .report import plot_metric_report

    cfg = _load_config(args, {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ids, corrupt, clean = load_pairs(args.data)
    if args.restored:
        results = np.stack([read_aft(Path(args.restored) / f"{pid}_restored.aft")
                            for pid in ids])
    else:
        results = corrupt
    report = evaluate_pairs(ids, results, clean)
    (out / "metrics.csv").write_text(report.to_csv())
    plot_metric_report(report, out / "metrics.png")
    cfg.write_resolved(out)
    logger.info("mean PSNR %.2f dB, SSIM %.4f, UQI %.4f over %d images",
                report.mean_psnr, report.mean_ssim, report.mean_uqi, len(report))
    return 0


def _cmd_selftest() -> int:
    from .selftest import run_all

    results = run_all()
    failed = 0
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        failed += 0 if passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def main(argv=None) -> int:
    _apply_thread_cap()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "restore":
            return _cmd_restore(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "selftest":
            return _cmd_selftest()
        raise AssertionError(f"unhandled command {args.command}")
    except Exception as err:  # noqa: BLE001 - single CLI failure boundary
        logger.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
