"""``warmscp`` command line: solve, dataset, train, mc.

Exit codes: 0 success, 2 configuration error, 3 solver failure or no
convergence, 4 missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .conic import make_backend
from .config import PRESETS, ConfigError, RunConfig, load_config
from .dataset import DatasetError, build_dataset, export_text, jsonable, load_dataset
from .discretization import PropagationError
from .mlp import GenerationError, ModelFormatError, generate_trajectory, load_model, save_model, train
from .scp import DATASET, ONLINE, ScpAbort, run_scp, straight_line_init
from .simulate import run_monte_carlo

OUTPUT_ENV = "WARMSCP_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_MISSING = 4

STATE_COLUMNS = [
    "m_kg", "rx_m", "ry_m", "rz_m", "vx_mps", "vy_mps", "vz_mps",
    "qw", "qx", "qy", "qz", "wx_radps", "wy_radps", "wz_radps",
]  # fmt: skip
CONTROL_COLUMNS = ["Tx_N", "Ty_N", "Tz_N"]

log = logging.getLogger("warmscp")


class MissingArtifact(RuntimeError):
    pass


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if not isinstance(v, (int, str)) else str(v) for v in row) + "\n")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(jsonable(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _output_dir(cfg: RunConfig, args) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ENV) or cfg.paths.output_dir)


def _artifact(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out / p


# -- commands ----------------------------------------------------------------


def cmd_solve(cfg: RunConfig, args, out: Path) -> int:
    problem = cfg.problem()
    scp_cfg = cfg.scp.build()
    n = problem.n_nodes
    if args.init == "model":
        model_path = Path(args.model) if args.model else _artifact(out, cfg.paths.model)
        if not model_path.exists():
            raise MissingArtifact(f"model file {model_path} not found (run `warmscp train` first)")
        model = load_model(model_path)
        t0 = time.perf_counter()
        try:
            init = generate_trajectory(model, problem.x0, problem.bounds.t_b0, n).to_reference(scp_cfg.tf_guess)
            init_used = "model"
        except GenerationError as exc:
            log.warning("generator failed (%s); falling back to straight-line init", exc)
            init = straight_line_init(problem.x0, problem.bounds, n, scp_cfg.tf_guess)
            init_used = "straight (fallback)"
        gen_time = time.perf_counter() - t0
    else:
        init = straight_line_init(problem.x0, problem.bounds, n, scp_cfg.tf_guess)
        init_used, gen_time = "straight", 0.0

    out.mkdir(parents=True, exist_ok=True)
    try:
        res = run_scp(problem, init, scp_cfg, make_backend(cfg.scp.backend))
    except ScpAbort as exc:
        _write_iterations(out / "iterations.csv", exc.log)
        _write_json(out / "summary.json", {"converged": False, "error": str(exc), "iterations": len(exc.log), "init": init_used})
        log.error("%s", exc)
        return EXIT_SOLVER
    except PropagationError as exc:
        _write_json(out / "summary.json", {"converged": False, "error": str(exc), "init": init_used})
        log.error("%s", exc)
        return EXIT_SOLVER

    traj = res.trajectory
    times = np.linspace(0.0, traj.tf, traj.n)
    _write_csv(out / "trajectory.csv", ["t_s"] + STATE_COLUMNS + CONTROL_COLUMNS, np.column_stack([times, traj.xs, traj.us]))
    _write_iterations(out / "iterations.csv", res.log)
    summary = {
        "converged": res.converged,
        "reason": res.reason,
        "iterations": res.iterations,
        "final_mass_kg": res.final_mass,
        "tf_s": traj.tf,
        "max_shooting_defect_nondim": res.max_defect,
        "init": init_used,
        "generator_time_s": gen_time,
        "solve_time_s": sum(r.wall_time for r in res.log),
        "criteria_mode": scp_cfg.criteria_mode,
    }
    _write_json(out / "summary.json", summary)
    print(f"converged={res.converged} iterations={res.iterations} final_mass={res.final_mass:.1f} kg tf={traj.tf:.3f} s")
    return EXIT_OK if res.converged else EXIT_SOLVER


def _write_iterations(path: Path, records) -> None:
    header = ["iteration", "j_tr", "j_vc", "max_state_diff_nondim", "tf_nondim", "final_mass_nondim", "discretize_time_s", "solve_time_s", "wall_time_s", "status"]
    rows = [
        [r.iteration, r.j_tr, r.j_vc, r.max_state_diff, r.tf, r.final_mass, r.discretize_time, r.solve_time, r.wall_time, r.status]
        for r in records
    ]
    _write_csv(path, header, rows)


def cmd_dataset(cfg: RunConfig, args, out: Path) -> int:
    problem = cfg.problem()
    ds_dir = _artifact(out, cfg.paths.dataset)
    t0 = time.perf_counter()

    def progress(done, total):
        if done % 50 == 0 or done == total:
            log.info("dataset: %d/%d problems", done, total)

    manifest, records = build_dataset(
        problem,
        cfg.dataset.ranges(),
        cfg.dataset.count,
        cfg.scp.build(DATASET),
        cfg.dataset.split_fraction,
        jobs=args.jobs,
        master_seed=cfg.dataset.seed,
        out_dir=ds_dir,
        progress=progress,
    )
    if args.export_text:
        export_text(load_dataset(ds_dir), ds_dir / "records.csv")
    summary = {
        "dataset_dir": str(ds_dir),
        "acceptance": manifest.acceptance,
        "config_hash": manifest.config_hash,
        "train_records": len(manifest.train_ids),
        "test_records": len(manifest.test_ids),
        "wall_time_s": time.perf_counter() - t0,
    }
    _write_json(out / "dataset_summary.json", summary)
    print(f"accepted {manifest.record_count}/{cfg.dataset.count} trajectories -> {ds_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    ds_dir = _artifact(out, cfg.paths.dataset)
    if not (ds_dir / "manifest.json").exists():
        raise MissingArtifact(f"no dataset at {ds_dir} (run `warmscp dataset` first)")
    data = load_dataset(ds_dir)
    tcfg = cfg.train.build()
    t0 = time.perf_counter()

    def progress(epoch, hist):
        if (epoch + 1) % 10 == 0:
            log.info("epoch %d train %.4g test %.4g lr %.1e", epoch + 1, hist.train_loss[-1], hist.test_mse[-1], hist.lr[-1])

    model, hist = train(
        data.trajectories("train"),
        data.trajectories("test"),
        tcfg,
        metadata={"dataset": data.manifest.config_hash, "records_sha256": data.manifest.records_sha256},
        progress=progress,
    )
    model_path = _artifact(out, cfg.paths.model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)
    best = hist.best_so_far()
    _write_csv(
        out / "losses.csv",
        ["epoch", "learning_rate", "train_loss_normalized", "train_mse_normalized", "test_mse_normalized", "best_train_loss_normalized"],
        [[i + 1, hist.lr[i], hist.train_loss[i], hist.train_mse[i], hist.test_mse[i], best[i]] for i in range(len(best))],
    )
    summary = {
        "model": str(model_path),
        "epochs": tcfg.epochs,
        "final_train_loss": hist.train_loss[-1],
        "final_test_mse": hist.test_mse[-1],
        "wall_time_s": time.perf_counter() - t0,
        "sizes": model.sizes,
    }
    _write_json(out / "train_summary.json", summary)
    print(f"trained {model.sizes} for {tcfg.epochs} epochs -> {model_path}")
    return EXIT_OK


def cmd_mc(cfg: RunConfig, args, out: Path) -> int:
    model_path = Path(args.model) if args.model else _artifact(out, cfg.paths.model)
    if not model_path.exists():
        raise MissingArtifact(f"model file {model_path} not found (run `warmscp train` first)")
    model = load_model(model_path)
    problem = cfg.problem()

    def progress(done, total):
        if done % 10 == 0 or done == total:
            log.info("mc: %d/%d cases", done, total)

    summary = run_monte_carlo(
        problem,
        cfg.dataset.ranges(),
        cfg.mc.n_cases,
        cfg.scp.build(ONLINE),
        model,
        jobs=args.jobs,
        master_seed=cfg.mc.seed,
        records_path=out / "mc_records.jsonl",
        progress=progress,
    )
    _write_json(out / "mc_summary.json", summary.aggregate)
    header = ["case", "method", "converged", "iterations", "generator_time_s", "solve_time_s", "final_mass_kg", "tf_s",
              "err_r_m", "err_v_mps", "err_q", "err_w_radps", "err_q_raw"]  # fmt: skip
    rows = [
        [r.case, r.method, int(r.converged), r.iterations, r.generator_time, r.solve_time, r.final_mass, r.tf,
         r.err_r, r.err_v, r.err_q, r.err_w, r.err_q_raw]  # fmt: skip
        for r in summary.records
    ]
    _write_csv(out / "mc_cases.csv", header, rows)
    agg = summary.aggregate
    for m in agg:
        print(f"{m}: median iterations {agg[m]['iterations'].get('median')}, mean {agg[m]['iterations'].get('mean'):.3f}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "dataset": cmd_dataset, "train": cmd_train, "mc": cmd_mc}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="warmscp", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="YAML config file")
    ap.add_argument("--preset", choices=PRESETS, help="start from a shipped preset")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and paths.output_dir)")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for dataset/mc")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="solve the configured mission")
    s.add_argument("--init", choices=("straight", "model"), default="straight")
    s.add_argument("--model", help="model file (default: paths.model)")
    d = sub.add_parser("dataset", help="build the training dataset")
    d.add_argument("--export-text", action="store_true", help="also write a CSV copy of the records")
    sub.add_parser("train", help="train the trajectory generator")
    m = sub.add_parser("mc", help="paired Monte Carlo comparison")
    m.add_argument("--model", help="model file (default: paths.model)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.preset, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _output_dir(cfg, args)
    try:
        code = COMMANDS[args.command](cfg, args, out)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetError, ModelFormatError) as exc:
        print(f"error: unusable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    if code == EXIT_OK or args.command == "solve":
        _write_json(out / "config_used.json", cfg.to_dict())
    return code


if __name__ == "__main__":
    sys.exit(main())
