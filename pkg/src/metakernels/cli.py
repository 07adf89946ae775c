"""Command line: ``metakernels train | eval | export-curves``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, build_net, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_seed_overrides, load_config
from .elbo import IterationRecord, evaluate, meta_train, predict_tasks
from .optim import AdamState
from .tasks import episode_stream, sine_function

log = logging.getLogger("metakernels")

METRIC_COLUMNS = ["iteration", "elbo", "log_lik", "kl", "eval_metric"]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _truncate_metrics(path: Path, next_iteration: int):
    """Drop rows logged after the checkpoint being resumed from."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < next_iteration]
    if len(kept) != len(lines):
        path.write_text("".join(kept))


def run_training(cfg: RunConfig, resume: Path | None = None, max_iterations: int | None = None) -> dict:
    """Train per ``cfg``, writing metrics.csv, checkpoints and summary.json.

    ``max_iterations`` stops early (used to cut a run for resume tests).
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if resume is not None:
        ckpt = load_checkpoint(resume, expect_config=cfg)
        net, opt, first = ckpt.net, ckpt.optimizer, ckpt.next_iteration
        _truncate_metrics(out / "metrics.csv", first)
    else:
        net, opt, first = build_net(cfg), AdamState(lr=cfg.train.lr), 0
        (out / "metrics.csv").unlink(missing_ok=True)

    stop = cfg.train.iterations if max_iterations is None else min(max_iterations, cfg.train.iterations)
    log_tasks = cfg.task.eval_tasks(cfg.seeds.tasks, cfg.log_eval_episodes) if cfg.log_eval_episodes else []
    metrics_path = out / "metrics.csv"
    new_file = not metrics_path.exists()
    fh = metrics_path.open("a", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    if new_file:
        writer.writerow(METRIC_COLUMNS)
        fh.flush()

    def on_iteration(rec: IterationRecord, net, opt):
        done = rec.iteration + 1
        if done % cfg.log_every == 0 or done == cfg.train.iterations:
            if log_tasks:
                rec.eval_metric = evaluate(net, log_tasks, cfg.train, cfg.eval_mode, cfg.seeds.sampling)["metric_mean"]
            writer.writerow([rec.iteration, _fmt(rec.elbo), _fmt(rec.log_lik), _fmt(rec.kl), _fmt(rec.eval_metric)])
            fh.flush()
            log.info("iter %d elbo %.4f log_lik %.4f kl %.4f", rec.iteration, rec.elbo, rec.log_lik, rec.kl)
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{done:07d}.json", cfg, net, opt, done)

    gen = cfg.task.generator()
    stream = episode_stream(gen, cfg.train.episodes_per_iteration, stop, cfg.seeds.tasks, start_iteration=first)
    try:
        result = meta_train(cfg.train, net, stream, opt, start_iteration=first, on_iteration=on_iteration)
    finally:
        fh.close()
    last = first + len(result.history)
    save_checkpoint(out / "checkpoint.json", cfg, net, opt, last)

    eval_tasks = cfg.task.eval_tasks(cfg.seeds.tasks, cfg.eval_episodes)
    final = evaluate(net, eval_tasks, cfg.train, cfg.eval_mode, cfg.seeds.sampling)
    baseline = evaluate(net, eval_tasks, cfg.train, "baseline", cfg.seeds.sampling)
    summary = {
        "metric": final["metric"],
        "final_eval_mean": final["metric_mean"],
        "final_eval_std": final["metric_std"],
        "baseline_eval_mean": baseline["metric_mean"],
        "baseline_eval_std": baseline["metric_std"],
        "eval_episodes": cfg.eval_episodes,
        "eval_mode": cfg.eval_mode,
        "iterations_completed": last,
        "num_parameters": net.num_parameters(),
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "wall_time_s": time.perf_counter() - start,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def eval_metrics(ckpt_path, episodes: int, mode: str, seed_overrides=None, shots: int | None = None) -> dict:
    if episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {episodes}")
    ckpt = load_checkpoint(ckpt_path)
    cfg = apply_seed_overrides(ckpt.config, seed_overrides)
    if shots is not None:
        cfg.task.shots = shots
    tasks = cfg.task.eval_tasks(cfg.seeds.tasks, episodes)
    res = evaluate(ckpt.net, tasks, cfg.train, mode, cfg.seeds.sampling)
    return {"metric": res["metric"], "metric_mean": res["metric_mean"], "metric_std": res["metric_std"],
            "episodes": episodes, "mode": mode}


def export_curves(ckpt_path, task_id: int, grid: int = 200, mode: str = "sampled", at_queries: bool = False,
                  episodes: int | None = None, seed_overrides=None) -> list[dict]:
    """Rows (x, y_true, y_pred, is_support) for one held-out sine task."""
    ckpt = load_checkpoint(ckpt_path)
    cfg = apply_seed_overrides(ckpt.config, seed_overrides)
    if cfg.task.kind != "sine":
        raise ConfigError("curves are only defined for 1-d regression (task.kind: sine)")
    limit = cfg.eval_episodes if episodes is None else episodes
    if not 0 <= task_id < limit:
        raise ConfigError(f"unknown task id {task_id}; eval set has ids 0..{limit - 1}")
    if grid < 1:
        raise ConfigError("--grid must be >= 1")
    batch = cfg.train.episodes_per_iteration
    b0 = (task_id // batch) * batch
    tasks = cfg.task.eval_tasks(cfg.seeds.tasks, b0 + batch)[b0:]
    task = tasks[task_id - b0]
    if at_queries:
        xs = task.query_x
        y_true = task.query_y[:, 0]
    else:
        xs = np.linspace(*cfg.task.x_range, grid).reshape(-1, 1)
        y_true = sine_function(xs[:, 0], task.meta["amplitude"], task.meta["phase"])
    grids = [t.query_x for t in tasks]
    grids[task_id - b0] = np.vstack([xs, task.support_x])
    preds = predict_tasks(ckpt.net, tasks, cfg.train, mode, cfg.seeds.sampling, x_grids=grids, start_index=b0)
    pred = preds[task_id - b0][:, 0]
    n = xs.shape[0]
    rows = [{"x": float(x), "y_true": float(y), "y_pred": float(p), "is_support": 0}
            for x, y, p in zip(xs[:, 0], y_true, pred[:n])]
    rows += [{"x": float(x), "y_true": float(y), "y_pred": float(p), "is_support": 1}
             for x, y, p in zip(task.support_x[:, 0], task.support_y[:, 0], pred[n:])]
    return rows


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metakernels", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--seed-override", action="append", default=[], metavar="K=V")

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out tasks")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=200)
    e.add_argument("--mode", choices=["sampled", "mean", "baseline"], default="sampled")
    e.add_argument("--shots", type=int)
    e.add_argument("--seed-override", action="append", default=[], metavar="K=V")

    c = sub.add_parser("export-curves", help="dump dense predictions for one held-out task")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--task-id", type=int, required=True)
    c.add_argument("--grid", type=int, default=200)
    c.add_argument("--mode", choices=["sampled", "mean", "baseline"], default="sampled")
    c.add_argument("--at-queries", action="store_true", help="use the task's query inputs instead of a grid")
    c.add_argument("--out", help="CSV path (default: stdout)")
    c.add_argument("--seed-override", action="append", default=[], metavar="K=V")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            cfg = apply_seed_overrides(load_config(args.config), args.seed_override)
            summary = run_training(cfg, Path(args.checkpoint) if args.checkpoint else None)
            print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=2))
        elif args.command == "eval":
            res = eval_metrics(args.checkpoint, args.episodes, args.mode, args.seed_override, args.shots)
            print(json.dumps(res))
        else:
            rows = export_curves(args.checkpoint, args.task_id, args.grid, args.mode, args.at_queries,
                                 seed_overrides=args.seed_override)
            fh = open(args.out, "w", newline="") if args.out else sys.stdout
            try:
                w = csv.DictWriter(fh, fieldnames=["x", "y_true", "y_pred", "is_support"], lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
            finally:
                if args.out:
                    fh.close()
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
