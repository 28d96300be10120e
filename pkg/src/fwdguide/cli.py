"""Command-line entry point: ``fwdguide {train,guide,compare,membench}``.

Exit codes: 0 success, 2 usage/config/missing input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .diffusion import make_schedule
from .evaluation import compute_metrics, make_moons, memory_bench
from .guidance import GUESSES, STRATEGIES, run
from .model import CheckpointError, TrainingDivergedError, load_params, save_params, train
from .numerics import ContractError, NumericError, RngState
from .svg import scatter_svg

log = logging.getLogger("fwdguide")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

COMPARE_ROWS = (
    ("unguided", ""),
    ("tweedie", ""),
    ("direct", ""),
    ("titan", "random"),
    ("titan", "score"),
    ("titan", "sampled"),
)


class UsageError(Exception):
    """Bad input that is the caller's fault; reported with exit code 2."""


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------


def atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def parse_depths(text: str) -> tuple[int, ...]:
    try:
        depths = tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise UsageError(f"--depths must be comma-separated integers, got {text!r}") from None
    if not depths or any(d < 1 for d in depths):
        raise UsageError(f"--depths must be positive integers, got {text!r}")
    return depths


# --------------------------------------------------------------------------
# shared setup
# --------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else RunConfig()
    if args.out_dir is not None:
        cfg = cfg.replace("run", out_dir=args.out_dir)
    if args.seed is not None:
        section = "train" if args.command == "train" else "run"
        cfg = cfg.replace(section, seed=args.seed)
    if getattr(args, "strategy", None):
        cfg = cfg.replace("guidance", strategy=args.strategy)
    if getattr(args, "guess", None):
        cfg = cfg.replace("guidance", guess=args.guess)
    if getattr(args, "depths", None):
        cfg = cfg.replace("run", depths=parse_depths(args.depths))
    return cfg


def out_dir(cfg: RunConfig) -> str:
    path = cfg.run.out_dir
    os.makedirs(path, exist_ok=True)
    return path


def checkpoint_path(cfg: RunConfig) -> str:
    ck = cfg.run.checkpoint
    return ck if os.path.isabs(ck) else os.path.join(cfg.run.out_dir, ck)


def schedule(cfg: RunConfig):
    return make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def reference(cfg: RunConfig):
    return make_moons(cfg.data.n, cfg.data.noise_sigma, cfg.data.seed)


def load_model(cfg: RunConfig):
    path = checkpoint_path(cfg)
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path!r} not found; run 'fwdguide train' first")
    params = load_params(path)
    if params.T != cfg.schedule.T:
        raise UsageError(f"checkpoint was trained with T={params.T}, config has T={cfg.schedule.T}")
    return params


def run_strategy(cfg: RunConfig, model, s, strategy: str, guess: str):
    gcfg = cfg.guidance_config(strategy=strategy, guess=guess or cfg.guidance.guess)
    return run(strategy, model, cfg.objective_fn(), gcfg, RngState(cfg.run.seed), s, n=cfg.run.n)


def _label(strategy: str, guess: str) -> str:
    return f"{strategy}-{guess}" if strategy == "titan" else strategy


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    d = out_dir(cfg)
    cfgmod.write_config(cfg, os.path.join(d, "config.resolved.ini"))
    tr = cfg.train
    params, report = train(
        reference(cfg), schedule(cfg), steps=tr.steps, batch=tr.batch, lr=tr.lr, seed=tr.seed,
        freqs=cfg.model.freqs, hidden=cfg.model.hidden,
    )
    save_params(params, checkpoint_path(cfg))
    atomic_write(os.path.join(d, "train_loss.csv"), csv_text(("step", "loss"), report.epoch_losses))
    print(f"trained {report.steps} steps: loss {report.initial_loss:.4f} -> {report.final_loss:.4f}; "
          f"checkpoint {checkpoint_path(cfg)}")
    return EXIT_OK


def cmd_guide(cfg: RunConfig) -> int:
    d = out_dir(cfg)
    s = schedule(cfg)
    model = load_model(cfg)
    strategy, guess = cfg.guidance.strategy, cfg.guidance.guess
    z, traj, _ = run_strategy(cfg, model, s, strategy, guess)
    ref = reference(cfg)
    pts = z.numpy()
    label = _label(strategy, guess)
    atomic_write(os.path.join(d, f"samples_{label}.csv"), csv_text(("x", "y"), pts.tolist()))
    atomic_write(
        os.path.join(d, f"trajectory_{label}.csv"),
        csv_text(("t", "loss", "h", "update_norm"), [(st.t, st.loss, st.h, st.update_norm) for st in traj.steps]),
    )
    obj = cfg.objective_fn()
    radius = obj.c ** 0.5 if obj.kind == "circle" else None
    atomic_write(os.path.join(d, f"samples_{label}.svg"), scatter_svg(ref.numpy(), pts, radius, title=label))
    m = compute_metrics(z, ref, obj.c, cfg.metrics.tol)
    print(
        f"strategy={strategy} guess={guess if strategy == 'titan' else '-'} n={pts.shape[0]} "
        f"satisfaction={m.satisfaction_rate:.4f} median_residual={m.median_abs_residual:.5f} "
        f"peak_scalars={traj.peak_scalars} tape_scalars={traj.tape_scalars}"
    )
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    d = out_dir(cfg)
    s = schedule(cfg)
    model = load_model(cfg)
    ref = reference(cfg)
    obj = cfg.objective_fn()
    rows = []
    for strategy, guess in COMPARE_ROWS:
        z, traj, _ = run_strategy(cfg, model, s, strategy, guess)
        m = compute_metrics(z, ref, obj.c, cfg.metrics.tol)
        rows.append((strategy, guess, m.satisfaction_rate, m.median_abs_residual, m.energy_distance,
                     m.dispersion, traj.peak_scalars))
        log.info("%s: satisfaction %.3f", _label(strategy, guess), m.satisfaction_rate)
    header = ("strategy", "guess", "satisfaction", "median_residual", "energy_distance", "dispersion", "peak_scalars")
    text = csv_text(header, rows)
    atomic_write(os.path.join(d, "compare.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_membench(cfg: RunConfig) -> int:
    d = out_dir(cfg)
    s = schedule(cfg)
    for depth in cfg.run.depths:
        if depth > s.T:
            raise UsageError(f"depth {depth} exceeds T={s.T}")
    model = load_model(cfg)
    report = memory_bench(model, cfg.objective_fn(), cfg.run.depths, n=cfg.run.n, s=s,
                          cfg=cfg.guidance_config(), seed=cfg.run.seed)
    text = csv_text(("strategy", "depth", "peak_scalars", "tape_scalars"),
                    [(r.strategy, r.depth, r.peak_scalars, r.tape_scalars) for r in report.rows])
    atomic_write(os.path.join(d, "membench.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "guide": cmd_guide, "compare": cmd_compare, "membench": cmd_membench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override the seed (train.seed for train, run.seed otherwise)")
    common.add_argument("--out-dir", dest="out_dir", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fwdguide", description="Forward-gradient guidance for a toy diffusion model.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the denoiser on the Moons data")
    g = sub.add_parser("guide", parents=[common], help="run one guided sampling strategy")
    g.add_argument("--strategy", choices=STRATEGIES)
    g.add_argument("--guess", choices=GUESSES)
    sub.add_parser("compare", parents=[common], help="metrics for every strategy")
    m = sub.add_parser("membench", parents=[common], help="guidance memory versus unroll depth")
    m.add_argument("--depths", help="comma-separated unroll depths, e.g. 5,10,20")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError, CheckpointError, ContractError) as exc:
        print(f"fwdguide: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, NumericError) as exc:
        print(f"fwdguide: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
