"""Command line interface: gen, pretrain, distill, eval, ablate, track, detect.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
Every command that writes outputs also writes the fully resolved experiment
configuration next to them.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import dataio, distill, evaluation, keypoints, neural, plotting, pretrain, synthgen
from .core import PointDistillError, make_rng
from .dataio import ExperimentConfig, load_config
from .metrics import THRESHOLDS, EvalReport

ALPHA_GRID = ("off", 2.5, 5.0, 7.5)
TEACHER_GRID = ("self", "self+lk")


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _alpha_arg(text: str):
    if text == "off":
        return "off"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'off', got {text!r}") from None


@contextmanager
def _lock(directory: Path):
    """Exclusive ownership of an output directory for the life of the command."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PointDistillError(f"{directory} is locked by another run ({lock} exists)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_config(path: Path, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    obj = {"config": cfg.to_json()}
    if extra:
        obj["run"] = extra
    dataio.write_json(path, obj)


def _write_csv(path: Path, fields, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n",
                           extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _progress(label: str, total: int, every: int = 500):
    t0 = time.perf_counter()

    def cb(row):
        s = row["step"] + 1
        if s % every == 0 or s == total:
            _log(f"[{label}] step {s}/{total} loss {row['loss']:.4f} "
                 f"retained {row['retention_rate']:.2f} ({time.perf_counter() - t0:.0f}s)")
    return cb


def _config(args, **overrides) -> ExperimentConfig:
    return load_config(args.config, overrides)


def _sidecar(ckpt: Path, suffix: str) -> Path:
    return ckpt.with_name(ckpt.name + suffix)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args, seed=args.seed, width=args.width, height=args.height, frames=args.frames)
    n = args.videos
    if n is None:
        n = cfg.source_videos if args.domain == "source" else cfg.target_videos
    if n < 1:
        raise UsageError("--videos must be >= 1")
    out = Path(args.out)
    if out.exists() and any(p.name != ".lock" for p in out.iterdir()):
        raise PointDistillError(f"output directory {out} is not empty")
    with _lock(out):
        synthgen.make_domain_corpus(args.domain, n, (cfg.width, cfg.height), cfg.frames,
                                    cfg.seed, out, motion=args.motion)
        _write_config(out / "config.json", cfg,
                      {"command": "gen", "domain": args.domain, "videos": n,
                       "motion": args.motion})
    _log(f"wrote {n} {args.domain} videos to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args, seed=args.seed, pretrain_steps=args.steps, pretrain_lr=args.lr)
    corpus = dataio.VideoCorpus(args.corpus)
    labels = pretrain.load_labels(args.corpus, corpus)
    out = Path(args.out)
    with _lock(out.parent):
        init = neural.init_params(make_rng(cfg.seed, "init"))
        dcfg = distill.DistillConfig.from_experiment(cfg, total_steps=cfg.pretrain_steps,
                                                    alpha="off")
        lw = neural.LossWeights(cfg.huber_delta, cfg.occluded_weight, cfg.gamma)
        params, log = pretrain.pretrain_run(init, corpus, labels, dcfg, cfg.pretrain_lr, lw,
                                            on_step=_progress("pretrain", dcfg.total_steps))
        neural.save_checkpoint(out, params, step=cfg.pretrain_steps, seed=cfg.seed,
                               extra={"stage": "pretrain"})
        log.write_csv(_sidecar(out, ".log.csv"))
        plotting.training_curves(log.rows, _sidecar(out, ".curves.svg"), title="pretraining")
        _write_config(_sidecar(out, ".config.json"), cfg,
                      {"command": "pretrain", "corpus": str(args.corpus)})
    _log(f"pretrained {cfg.pretrain_steps} steps in {log.seconds:.0f}s -> {out}")
    return 0


def _adam(cfg: ExperimentConfig, steps: int):
    return neural.AdamState(base_lr=cfg.lr0, total_steps=steps)


def cmd_distill(args) -> int:
    cfg = _config(args, seed=args.seed, alpha=args.alpha, total_steps=args.steps,
                  teacher=args.teacher)
    init, _ = neural.load_checkpoint(args.init)
    corpus = dataio.VideoCorpus(args.corpus)
    pool = distill.make_pool(cfg.teacher, init)
    out = Path(args.out)
    with _lock(out.parent):
        dcfg = distill.DistillConfig.from_experiment(cfg)
        lw = neural.LossWeights(cfg.huber_delta, cfg.occluded_weight, cfg.gamma)
        ckpt_dir = _sidecar(out, ".steps") if cfg.checkpoint_every else None
        params, log = distill.distill_run(init, pool, corpus, dcfg, lw,
                                          _adam(cfg, dcfg.total_steps), ckpt_dir,
                                          on_step=_progress("distill", dcfg.total_steps))
        neural.save_checkpoint(out, params, step=dcfg.total_steps, seed=cfg.seed,
                               extra={"stage": "distill", "teacher": cfg.teacher,
                                      "alpha": cfg.alpha,
                                      "teacher_digests": log.teacher_digests_after})
        log.write_csv(_sidecar(out, ".log.csv"))
        plotting.training_curves(log.rows, _sidecar(out, ".curves.svg"),
                                 title=f"distillation, teacher {cfg.teacher}, alpha {cfg.alpha}")
        _write_config(_sidecar(out, ".config.json"), cfg,
                      {"command": "distill", "corpus": str(args.corpus), "init": str(args.init),
                       "teacher_digests_before": log.teacher_digests_before,
                       "teacher_digests_after": log.teacher_digests_after})
    _log(f"distilled {dcfg.total_steps} steps in {log.seconds:.0f}s -> {out}")
    return 0


def _tracker(args) -> distill.Teacher:
    if args.tracker == "lk":
        return distill.Teacher("lk", "classical")
    if not args.ckpt:
        raise UsageError("--ckpt is required unless --tracker lk")
    params, _ = neural.load_checkpoint(args.ckpt)
    return distill.Teacher(Path(args.ckpt).stem, "neural", params=params)


def _write_report(out: Path, report: EvalReport, stem: str = "report", title: str = "") -> None:
    dataio.write_json(out / f"{stem}.json", report.to_json())
    _write_csv(out / f"{stem}.csv", EvalReport.CSV_FIELDS, [report.csv_row()])
    plotting.accuracy_bars(report.accuracies, out / f"{stem}_accuracy.svg", title=title)


def cmd_eval(args) -> int:
    cfg = _config(args, eval_mode=args.mode)
    tracker = _tracker(args)
    corpus = dataio.VideoCorpus(args.corpus)
    out = Path(args.out)
    with _lock(out):
        report, preds = evaluation.evaluate_tracker(tracker, corpus, args.corpus, cfg.eval_mode,
                                                    cfg.eval_length, cfg.eval_stride)
        _write_report(out, report, title=f"{tracker.id} on {Path(args.corpus).name}")
        dataio.write_trajs(preds, out / "predictions.jsonl")
        _write_config(out / "config.json", cfg,
                      {"command": "eval", "corpus": str(args.corpus), "tracker": tracker.id,
                       "ckpt": str(args.ckpt) if args.ckpt else None})
    _log(f"MEE {report.mee:.3f} px, MCD {report.mcd:.3f} px, delta-avg {report.delta_avg:.2f}% "
         f"over {report.n_points} points")
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0


ABLATE_FIELDS = ("cell", "status", "steps_done", "mean_retention", "mee", "mcd", "delta_avg") + \
    tuple(f"acc_{t}" for t in THRESHOLDS) + ("teacher_mee", "teacher_delta_avg")


def _cell_name(value) -> str:
    return "off" if value == "off" else (value if isinstance(value, str) else f"{value:g}")


def cmd_ablate(args) -> int:
    cfg = _config(args, seed=args.seed, total_steps=args.steps)
    init, _ = neural.load_checkpoint(args.init)
    corpus = dataio.VideoCorpus(args.corpus)
    eval_corpus = dataio.VideoCorpus(args.eval_corpus)
    out = Path(args.out)
    lw = neural.LossWeights(cfg.huber_delta, cfg.occluded_weight, cfg.gamma)
    with _lock(out):
        _write_config(out / "config.json", cfg,
                      {"command": "ablate", "sweep": args.sweep, "corpus": str(args.corpus),
                       "eval_corpus": str(args.eval_corpus), "init": str(args.init)})
        teacher_report, _ = evaluation.evaluate_tracker(
            distill.Teacher("teacher", "neural", params=init), eval_corpus, args.eval_corpus,
            cfg.eval_mode, cfg.eval_length, cfg.eval_stride)
        _write_report(out, teacher_report, "teacher", "teacher (pretrained)")
        if args.sweep == "alpha":
            grid = [_cell_name(a) for a in ALPHA_GRID]
            cfgs = [distill.DistillConfig.from_experiment(cfg, alpha=a) for a in ALPHA_GRID]
            bars = [_progress(f"alpha {g}", cfg.total_steps) for g in grid]
            runs = _run_cells(lambda: distill.distill_sweep(
                init, distill.make_pool(cfg.teacher, init), corpus, cfgs, lw,
                lambda c: _adam(cfg, c.total_steps),
                [out / f"cell_{g}" if cfg.checkpoint_every else None for g in grid],
                on_step=lambda i, r: bars[i](r)),
                len(grid))
        else:
            grid = list(TEACHER_GRID)
            dcfg = distill.DistillConfig.from_experiment(cfg)
            runs = []
            for name in grid:
                runs += _run_cells(lambda name=name: [distill.distill_run(
                    init, distill.make_pool(name, init), corpus, dcfg, lw,
                    _adam(cfg, dcfg.total_steps),
                    on_step=_progress(f"pool {name}", dcfg.total_steps))], 1)
        rows = []
        for g, run in zip(grid, runs):
            row = {"cell": g, "teacher_mee": teacher_report.mee,
                   "teacher_delta_avg": teacher_report.delta_avg}
            if isinstance(run, str):
                row.update(status=run, steps_done=0)
                rows.append(row)
                continue
            params, log = run
            cell_dir = out / f"cell_{g}"
            neural.save_checkpoint(cell_dir / "student.ckpt", params, step=len(log.rows),
                                   seed=cfg.seed, extra={"sweep": args.sweep, "cell": g})
            log.write_csv(cell_dir / "log.csv")
            plotting.training_curves(log.rows, cell_dir / "curves.svg", title=f"cell {g}")
            report, _ = evaluation.evaluate_tracker(
                distill.Teacher(g, "neural", params=params), eval_corpus, args.eval_corpus,
                cfg.eval_mode, cfg.eval_length, cfg.eval_stride)
            _write_report(cell_dir, report, title=f"cell {g}")
            row.update(status="ok", steps_done=len(log.rows),
                       mean_retention=float(np.mean([r["retention_rate"] for r in log.rows]))
                       if log.rows else 0.0, **report.csv_row())
            rows.append(row)
        _write_csv(out / "ablation.csv", ABLATE_FIELDS, rows)
        dataio.write_json(out / "ablation.json", {"sweep": args.sweep, "rows": rows})
        plotting.ablation_bars(rows, out / "ablation.svg", "cell",
                               title=f"{args.sweep} sweep")
    for r in rows:
        _log(f"{r['cell']:>8}  {r['status']:<11} MEE {r.get('mee', float('nan')):.4f}  "
             f"delta-avg {r.get('delta_avg', float('nan')):.3f}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def _run_cells(fn, n: int):
    """Run ``fn``; on failure every cell it covers is marked instead of aborting the sweep."""
    try:
        return fn()
    except KeyboardInterrupt:
        return ["interrupted"] * n
    except PointDistillError as exc:
        _log(f"cell failed: {exc}")
        return ["failed"] * n


def cmd_track(args) -> int:
    tracker = _tracker(args)
    video = dataio.read_video(args.video)
    records = dataio.read_trajs(args.queries) if args.queries else None
    if records is None:
        raise UsageError("--queries is required")
    T = video.frame_count
    out = []
    groups: dict[int, list] = {}
    for r in records:
        groups.setdefault(r.query_frame, []).append(r)
    for t0 in sorted(groups):
        length = args.length or (T - 1 - t0) // args.stride + 1
        idx = t0 + args.stride * np.arange(length)
        if idx[-1] >= T or t0 < 0:
            raise PointDistillError(f"window from frame {t0} does not fit {T} frames")
        qarr = np.array([[r.x, r.y] for r in groups[t0]], dtype=np.float64)
        pts, vis = tracker.track_frames(video.frames[idx], qarr)
        for i, r in enumerate(groups[t0]):
            src = "teacher" if tracker.kind == "classical" else "student"
            out.append(dataio.TrajRecord(r.video_id, t0, r.x, r.y, pts[i].tolist(),
                                         vis[i].tolist(), src))
    dataio.write_trajs(out, args.out)
    _log(f"tracked {len(out)} queries -> {args.out}")
    return 0


def cmd_detect(args) -> int:
    video = dataio.read_video(args.video)
    if not 0 <= args.frame < video.frame_count:
        raise UsageError(f"--frame must lie in [0, {video.frame_count - 1}]")
    kps = keypoints.detect(video.frames[args.frame], args.max_n)
    recs = [dataio.TrajRecord(video.id, args.frame, k.x, k.y, [[k.x, k.y]], [True], "gt")
            for k in kps]
    if args.out:
        dataio.write_trajs(recs, args.out)
    else:
        for k in kps:
            print(json.dumps({"x": k.x, "y": k.y, "score": k.score, "frame": args.frame}))
    _log(f"{len(kps)} keypoints")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointdistill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of ExperimentConfig keys")
        return sp

    g = common(sub.add_parser("gen", help="generate a synthetic corpus"))
    g.add_argument("--domain", choices=("source", "target"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--motion", choices=("default", "translation"), default="default")
    g.set_defaults(func=cmd_gen)

    g = common(sub.add_parser("pretrain", help="supervised pretraining on source ground truth"))
    g.add_argument("--corpus", required=True)
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--steps", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_pretrain)

    g = common(sub.add_parser("distill", help="self-distillation on an unlabelled corpus"))
    g.add_argument("--corpus", required=True)
    g.add_argument("--init", required=True, help="initial student (and self teacher) checkpoint")
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--teacher", choices=sorted(dataio.TEACHER_POOLS))
    g.add_argument("--alpha", type=_alpha_arg)
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_distill)

    g = common(sub.add_parser("eval", help="score a tracker on a labelled corpus"))
    g.add_argument("--corpus", required=True)
    g.add_argument("--ckpt")
    g.add_argument("--tracker", choices=("neural", "lk"), default="neural")
    g.add_argument("--mode", choices=("final", "all"))
    g.add_argument("--out", required=True, help="report directory")
    g.set_defaults(func=cmd_eval)

    g = common(sub.add_parser("ablate", help="alpha or teacher-pool sweep"))
    g.add_argument("--sweep", choices=("alpha", "teachers"), required=True)
    g.add_argument("--corpus", required=True)
    g.add_argument("--eval-corpus", required=True)
    g.add_argument("--init", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_ablate)

    g = common(sub.add_parser("track", help="track JSONL queries through one video"))
    g.add_argument("--video", required=True)
    g.add_argument("--queries", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--ckpt")
    g.add_argument("--tracker", choices=("neural", "lk"), default="neural")
    g.add_argument("--stride", type=int, default=1)
    g.add_argument("--length", type=int, default=0)
    g.set_defaults(func=cmd_track)

    g = common(sub.add_parser("detect", help="Harris keypoints of one frame as JSONL"))
    g.add_argument("--video", required=True)
    g.add_argument("--frame", type=int, default=0)
    g.add_argument("--max-n", type=int, default=64)
    g.add_argument("--out")
    g.set_defaults(func=cmd_detect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return 2
    except dataio.ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    except (PointDistillError, OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
