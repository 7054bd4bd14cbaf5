"""Command-line entry point: ``onenet {train,solve,bench,check}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time

import numpy as np

from . import checks, nn, training
from .config import ConfigError, ExperimentConfig, TaskSection, load_config
from .datasets import (MNIST_FILES, DatasetHandle, load_image_dir, load_image_file, load_mnist,
                       save_image_file)
from .pipeline import admm_config, build_operator, build_prior, solve_image, synthesize

log = logging.getLogger("onenet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="onenet", description="Plug-and-play ADMM with a learned projector.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="INI experiment file (defaults apply when omitted)")
        p.add_argument("--out", default=".", help="output directory")
        for name in ("data", "operator", "training"):
            p.add_argument(f"--seed-{name}", type=int, dest=f"seed_{name}")

    p = sub.add_parser("train", help="train a projection network")
    common(p)
    p = sub.add_parser("solve", help="reconstruct one image with ADMM")
    common(p)
    p.add_argument("--input", help="ground-truth image (PNG/PGM); overrides paths.image")
    p.add_argument("--measurement", help="text file with one measurement per line")
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p = sub.add_parser("bench", help="run every configured task with every prior")
    common(p)
    p = sub.add_parser("check", help="run an invariant suite")
    p.add_argument("kind", choices=sorted(checks.SUITES))
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    for name in ("data", "operator", "training"):
        value = getattr(args, f"seed_{name}", None)
        if value is not None:
            setattr(cfg.seeds, name, value)
    return cfg


def _comment(cfg: ExperimentConfig, seed_name: str) -> str:
    return f"config={cfg.digest()} seed_{seed_name}={getattr(cfg.seeds, seed_name)}"


def _require(value, key):
    if not value:
        raise UsageError(f"config key paths.{key} is required for this command")
    return value


def load_dataset(path: str, split: str) -> DatasetHandle:
    if os.path.exists(os.path.join(path, MNIST_FILES[split][0])):
        return load_mnist(path, split)
    if os.path.isdir(path):
        return load_image_dir(path)
    raise FileNotFoundError(f"no dataset found at {path}")


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------- commands

def cmd_train(cfg: ExperimentConfig, out: str) -> int:
    data = load_dataset(_require(cfg.paths.dataset, "dataset"), "train")
    data = data.shuffled(cfg.seeds.data)
    if cfg.train.n_images:
        data = data.subset(0, cfg.train.n_images)
    t = cfg.train
    tcfg = training.TrainConfig(iterations=t.iterations, batch_size=t.batch_size, lr=t.lr,
                                beta1=t.beta1, beta2=t.beta2, c_clip=t.c_clip,
                                eval_every=t.eval_every, refresh_every=t.refresh_every,
                                patience=t.patience,
                                val_fraction=t.val_fraction, seed=cfg.seeds.training,
                                float32=t.float32)
    result = training.train(data, tcfg)
    os.makedirs(out, exist_ok=True)
    nn.save_model(result.projector, os.path.join(out, "model.prxa"))
    _write(os.path.join(out, "metrics.csv"),
           training.metrics_csv(result.state.history, _comment(cfg, "training")))
    print(f"trained {result.state.iteration} iterations; best validation at {result.best_iteration}"
          f"{' (stopped early)' if result.stopped_early else ''}")
    return EXIT_OK


def _load_model(cfg):
    if cfg.prior.kind != "projector":
        return None
    return nn.load_model(_require(cfg.paths.model, "model"))


def cmd_solve(cfg: ExperimentConfig, out: str, image_path=None, measurement_path=None,
              fmt="png") -> int:
    image_path = image_path or cfg.paths.image
    measurement_path = measurement_path or cfg.paths.measurement
    gt = None
    if measurement_path:
        shape = (cfg.data.height, cfg.data.width, cfg.data.channels)
    elif image_path:
        gt = load_image_file(image_path)
        shape = gt.shape
    else:
        data = load_dataset(_require(cfg.paths.dataset, "dataset"), cfg.data.split)
        if not 0 <= cfg.data.index < len(data):
            raise UsageError(f"data.index {cfg.data.index} outside dataset of {len(data)} images")
        gt = data[cfg.data.index]
        shape = gt.shape

    model = _load_model(cfg)
    if model is not None and tuple(model.input_shape) != tuple(shape):
        raise ValueError(f"projector expects images of shape {model.input_shape}, got {shape}")
    A = build_operator(cfg.task, shape, cfg.seeds.operator)
    if measurement_path:
        y = np.loadtxt(measurement_path, dtype=np.float64, ndmin=1)
        if y.size != A.out_dim:
            raise ValueError(f"measurement has {y.size} entries; operator expects {A.out_dim}")
    else:
        y = synthesize(A, gt, cfg.task.sigma, cfg.seeds.data)
    prior = build_prior(cfg, shape, model)
    res = solve_image(A, y, prior, admm_config(cfg), shape, ground_truth=gt)

    os.makedirs(out, exist_ok=True)
    save_image_file(res.image, os.path.join(out, f"solution.{fmt}"))
    _write(os.path.join(out, "trace.csv"), res.trace.to_csv(comment=_comment(cfg, "operator")))
    msg = f"{res.trace.stop_reason} after {res.trace.iterations} iterations"
    if res.psnr is not None:
        msg += f"; PSNR {res.psnr:.2f} dB"
    print(msg)
    return EXIT_OK


SUMMARY_COLUMNS = ("task", "prior", "image", "psnr", "iterations", "stop_reason", "error")
TIMING_COLUMNS = ("task", "prior", "image", "seconds")


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


def run_bench(cfg: ExperimentConfig, images, model=None):
    """Solve every task x prior on every image.

    Returns (rows, timings); rows hold per-image results followed by one
    mean row per task and prior. Failures are recorded and the run continues.
    """
    rows, timings = [], []
    shape = images.shape[1:]
    for task_name in cfg.bench.tasks:
        task = TaskSection(**{**vars(cfg.task), "kind": task_name})
        task.sigma = cfg.bench.sigma_for(task_name, cfg.task.sigma)
        A = build_operator(task, shape, cfg.seeds.operator)
        admm = admm_config(cfg, task)
        for prior_name in cfg.bench.priors:
            sub = ExperimentConfig(**{**vars(cfg)})
            sub.prior = type(cfg.prior)(**{**vars(cfg.prior), "kind": prior_name})
            values = []
            try:
                prior = build_prior(sub, shape, model)
            except Exception as exc:  # recorded per row, run continues
                rows.append((task_name, prior_name, "all", None, None, "", str(exc)))
                continue
            for i, x in enumerate(images):
                try:
                    y = synthesize(A, x, task.sigma, cfg.seeds.data * 1_000_003 + i)
                    res = solve_image(A, y, prior, admm, shape, ground_truth=x)
                except Exception as exc:
                    rows.append((task_name, prior_name, str(i), None, None, "", str(exc)))
                    continue
                values.append(res.psnr)
                rows.append((task_name, prior_name, str(i), res.psnr, res.trace.iterations,
                             res.trace.stop_reason, ""))
                timings.append((task_name, prior_name, str(i), res.seconds))
            if values:
                rows.append((task_name, prior_name, "mean", float(np.mean(values)), None, "", ""))
    return rows, timings


def bench_csv(rows, comment) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for task, prior, image, value, iters, reason, err in rows:
        w.writerow([task, prior, image, _fmt(value), "" if iters is None else iters, reason, err])
    return buf.getvalue()


def timing_csv(timings, comment) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for task, prior, image, seconds in timings:
        w.writerow([task, prior, image, f"{seconds:.4f}"])
    return buf.getvalue()


def cmd_bench(cfg: ExperimentConfig, out: str) -> int:
    data = load_dataset(_require(cfg.paths.dataset, "dataset"), cfg.data.split)
    images = data.shuffled(cfg.seeds.data).images[:cfg.data.n_images]
    model = nn.load_model(cfg.paths.model) if "projector" in cfg.bench.priors and cfg.paths.model \
        else None
    t0 = time.perf_counter()
    rows, timings = run_bench(cfg, images, model)
    os.makedirs(out, exist_ok=True)
    comment = _comment(cfg, "data") + f" seed_operator={cfg.seeds.operator}"
    _write(os.path.join(out, "bench.csv"), bench_csv(rows, comment))
    _write(os.path.join(out, "timing.csv"), timing_csv(timings, comment))
    for row in rows:
        if row[2] == "mean":
            print(f"{row[0]:>18} {row[1]:>10}: mean PSNR {row[3]:.2f} dB")
    failures = sum(1 for r in rows if r[6])
    print(f"{len(images)} images, {failures} failed rows, {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_check(kind: str) -> int:
    results = checks.run_suite(kind)
    for r in results:
        print(r.line())
    worst = max(results, key=lambda r: r.error / r.threshold)
    ok = all(r.passed for r in results)
    print(f"{kind}: {'PASS' if ok else 'FAIL'} (worst {worst.name}: {worst.error:.3e})")
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            return cmd_check(args.kind)
        cfg = _load_cfg(args)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "solve":
            return cmd_solve(cfg, args.out, args.input, args.measurement, args.format)
        return cmd_bench(cfg, args.out)
    except (ConfigError, UsageError) as exc:
        print(f"onenet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"onenet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
