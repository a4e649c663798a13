"""Command-line entry point: data generation, training, evaluation and self-checks."""

from __future__ import annotations

import argparse
import csv
import io
import json
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import PlanError, PriorError, classify, err_diagnostic, plan_subinterval
from .config import ConfigError, ExperimentConfig, load, substream, substream_seed
from .data import (Dataset, corrupt_noisy, corrupt_partial, corrupt_semi, dataset_to_csv,
                   load_dataset, sample_dataset)
from .net import CheckpointError, ModelPair, load_checkpoint, save_checkpoint
from .objectives import NumericalError, train
from .oracle import bayes_accuracy
from .plotting import plot_err_violin, plot_samples, plot_training_log
from .sampling import (SampleBatch, centroid_rule_accuracy, condense, evaluate_generation,
                       noisy_subset_accuracy, sample_edm)
from .verify import GRADIENT_TOL, POOLED_SCORE_TOL, gradient_suite, pooled_score_check

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4


class CheckFailed(RuntimeError):
    pass


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _git_describe() -> str | None:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


class Run:
    """Artifact store for one output directory.

    Upstream artifacts are reused only when the directory's recorded config
    matches the current one; otherwise they are rebuilt deterministically.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        stamp = self.out / "config.resolved.json"
        same = stamp.exists() and stamp.read_text() == cfg.to_json()
        # artifacts usable as cached inputs: everything on disk when the config matches,
        # otherwise only what this run writes
        self.valid = {p.name for p in self.out.iterdir()} if same else set()
        stamp.write_text(cfg.to_json())
        version = {"package": "impdiff", "version": __version__, "git": _git_describe()}
        (self.out / "version.json").write_text(json.dumps(version, indent=2, sort_keys=True) + "\n")

    def path(self, name: str) -> Path:
        return self.out / name

    def _cached(self, name: str) -> bool:
        return name in self.valid and self.path(name).exists()

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        self.valid.add(name)
        return p

    # -- stages ------------------------------------------------------------
    def make_data(self, force: bool = False) -> tuple[Dataset, Dataset]:
        c = self.cfg.num_classes
        if not force and self._cached("train_clean.csv") and self._cached("test.csv"):
            return load_dataset(self.path("train_clean.csv"), c), load_dataset(self.path("test.csv"), c)
        train_set = sample_dataset(self.cfg.spec, self.cfg.data["n_train"], substream(self.cfg.seed, "data"))
        test_set = sample_dataset(self.cfg.spec, self.cfg.data["n_test"], substream(self.cfg.seed, "test"))
        self.write("train_clean.csv", dataset_to_csv(train_set))
        self.write("test.csv", dataset_to_csv(test_set))
        return train_set, test_set

    def corrupt(self, force: bool = False) -> Dataset:
        if not force and self._cached("train.csv"):
            return load_dataset(self.path("train.csv"), self.cfg.num_classes)
        clean, _ = self.make_data()
        rng = substream(self.cfg.seed, "corruption")
        mode, p = self.cfg.corruption["mode"], self.cfg.corruption["params"]
        if mode == "noisy":
            data = corrupt_noisy(clean, self.cfg.transition(), rng)
        elif mode == "partial":
            data = corrupt_partial(clean, p["mode"], float(p["q"]), rng)
        elif mode == "semi":
            data = corrupt_semi(clean, float(p["labeled_fraction"]), rng)
        else:
            data = clean
        self.write("train.csv", dataset_to_csv(data))
        return data

    def train(self, force: bool = False) -> ModelPair:
        if not force and self._cached("model.ckpt"):
            return load_checkpoint(self.path("model.ckpt"))
        data = self.corrupt()
        _, test_set = self.make_data()
        tc = replace(self.cfg.train, seed=substream_seed(self.cfg.seed, "train") % (1 << 31))
        result = train(data, tc, self.cfg.schedule, spec=self.cfg.spec,
                       transition=self.cfg.transition(), eval_data=test_set)
        save_checkpoint(result.pair, self.path("model.ckpt"))
        self.valid.add("model.ckpt")
        self.write("train_log.csv", result.log_csv())
        plot_training_log(result.log, self.path("train_log.png"))
        return result.pair

    def plan(self, delta: float | None = None, draws: int | None = None):
        return plan_subinterval(self.cfg.schedule, self.cfg.classifier["delta"] if delta is None else delta,
                                draws=draws or self.cfg.classifier["draws"])

    def samples(self, force: bool = False) -> list[SampleBatch]:
        c = self.cfg.num_classes
        if not force and self._cached("samples.csv"):
            return _read_samples(self.path("samples.csv"), c)
        model = self.train().teacher
        n, steps = self.cfg.sample["n"], self.cfg.sample["steps"]
        batches = [sample_edm(model, y, n, steps, self.cfg.schedule,
                              substream(self.cfg.seed, f"sample:{y}"), dim=self.cfg.spec.dim)
                   for y in range(c)]
        rows = [[b.y, *map(float, p)] for b in batches for p in b.points]
        header = ["y"] + [f"x{j}" for j in range(self.cfg.spec.dim)]
        self.write("samples.csv", _csv(rows, header))
        train_clean, _ = self.make_data()
        plot_samples(batches, self.path("samples.png"), reference=train_clean.x)
        return batches


def _read_samples(path: Path, c: int) -> list[SampleBatch]:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    batches = []
    for y in range(c):
        pts = raw[raw[:, 0] == y, 1:] if raw.size else np.zeros((0, 1))
        batches.append(SampleBatch(y, pts, np.array([]), "heun"))
    return batches


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_make_data(run: Run, args) -> int:
    train_set, test_set = run.make_data(force=True)
    print(f"train={len(train_set)} test={len(test_set)}")
    return EXIT_OK


def cmd_corrupt_labels(run: Run, args) -> int:
    data = run.corrupt(force=True)
    clean = data.y_true
    agree = np.where(data.mask[np.arange(len(data)), clean], 1.0, 0.0)
    size = data.mask.sum(1)
    rows = [[run.cfg.corruption["mode"], len(data), float(np.mean(size)),
             float(np.mean(agree)), float(np.mean((data.label == clean) | (data.label < 0)))]]
    text = _csv(rows, ["mode", "n", "mean_set_size", "true_in_set", "label_correct_or_absent"])
    run.write("corruption_summary.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    run.train(force=True)
    sys.stdout.write(run.path("train_log.csv").read_text().splitlines()[-1] + "\n")
    return EXIT_OK


def cmd_classify(run: Run, args) -> int:
    model = run.train().teacher
    _, test_set = run.make_data()
    plan = run.plan(draws=args.draws)
    c = run.cfg.num_classes
    post = classify(model, test_set.x, plan, np.full(c, 1.0 / c), substream(run.cfg.seed, "classify"))
    pred = post.argmax(1)
    rows = [[i, int(test_set.y_true[i]), int(pred[i]), *map(float, post[i])] for i in range(len(pred))]
    run.write("predictions.csv", _csv(rows, ["i", "y_true", "pred"] + [f"p{y}" for y in range(c)]))
    acc = float(np.mean(pred == test_set.y_true))
    bayes = bayes_accuracy(run.cfg.spec, test_set.x, test_set.y_true)
    text = _csv([[acc, bayes, plan.l, plan.r, plan.draws]], ["accuracy", "bayes_accuracy", "l", "r", "draws"])
    run.write("classify.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_plan_timesteps(run: Run, args) -> int:
    plan = run.plan(delta=args.delta)
    text = _csv([[plan.l, plan.r, plan.residual]], ["l", "r", "residual"])
    run.write("plan.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sample(run: Run, args) -> int:
    batches = run.samples(force=True)
    print(f"samples={sum(len(b) for b in batches)}")
    return EXIT_OK


def cmd_eval(run: Run, args) -> int:
    metrics = evaluate_generation(run.samples(), run.cfg.spec)
    rows = [[r["y"], r["n"], r["mean_error"], r["cov_error"], r["purity"]] for r in metrics.rows()]
    text = _csv(rows, ["y", "n", "mean_error", "cov_error", "purity"])
    run.write("gen_metrics.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_condense(run: Run, args) -> int:
    model = run.train().teacher
    data = run.corrupt()
    _, test_set = run.make_data()
    ipcs = args.ipc if args.ipc else run.cfg.condense["ipc"]
    ipcs = ipcs if isinstance(ipcs, list) else [ipcs]
    repeats = run.cfg.condense["repeats"]
    rows = []
    for ipc in ipcs:
        acc = condense(model, int(ipc), run.cfg.spec, test_set, substream(run.cfg.seed, f"condense:{ipc}"),
                       run.cfg.sample["steps"], run.cfg.schedule, repeats)
        base = noisy_subset_accuracy(data, int(ipc), test_set, substream(run.cfg.seed, f"subset:{ipc}"), repeats)
        rows.append([int(ipc), acc, base, centroid_rule_accuracy(run.cfg.spec, test_set)])
    text = _csv(rows, ["ipc", "accuracy", "noisy_subset_accuracy", "centroid_rule_accuracy"])
    run.write("condense.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(run: Run, args) -> int:
    """Subinterval diagnostic per class, with a violin figure."""
    model = run.train().teacher
    _, test_set = run.make_data()
    sub = test_set.subset(np.arange(min(len(test_set), args.points)))
    err, mean = err_diagnostic(model, sub.x, sub.y_true, run.plan(), substream(run.cfg.seed, "report"),
                               classes=run.cfg.num_classes)
    rows = [[i, int(sub.y_true[i]), float(err[i]), float(mean[i])] for i in range(len(sub))]
    run.write("err_diagnostic.csv", _csv(rows, ["i", "y", "err", "hbar_mean"]))
    plot_err_violin([err[sub.y_true == y] for y in range(run.cfg.num_classes)], run.path("err_violin.png"))
    ratio = float(np.median(np.abs(err)) / np.median(mean))
    text = _csv([[float(np.median(np.abs(err))), float(np.median(mean)), ratio]],
                ["median_abs_err", "median_hbar", "ratio"])
    run.write("err_summary.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify_pooled_score(run: Run, args) -> int:
    res = pooled_score_check(run.cfg.spec, n=args.n, seed=substream_seed(run.cfg.seed, "pooled_score"),
                         schedule=run.cfg.schedule)
    ok = bool(res.max() < POOLED_SCORE_TOL)
    text = _csv([[len(res), float(res.max()), float(np.median(res)), int(ok)]],
                ["n", "max_residual", "median_residual", "pass"])
    run.write("pooled_score.csv", text)
    sys.stdout.write(text)
    if not ok:
        raise CheckFailed(f"max residual {res.max():.3e} >= {POOLED_SCORE_TOL}")
    return EXIT_OK


def cmd_verify_gradients(run: Run, args) -> int:
    recs = gradient_suite(seed=substream_seed(run.cfg.seed, "gradients") % (1 << 31))
    rows = [[r.loss, r.input, r.coord, r.analytic, r.numeric, r.rel_err] for r in recs]
    run.write("gradients.csv", _csv(rows, ["loss", "input", "coord", "analytic", "numeric", "rel_err"]))
    worst: dict[str, float] = {}
    for r in recs:
        worst[r.loss] = max(worst.get(r.loss, 0.0), r.rel_err)
    text = _csv([[k, v, int(v < GRADIENT_TOL)] for k, v in worst.items()], ["loss", "max_rel_err", "pass"])
    sys.stdout.write(text)
    if any(v >= GRADIENT_TOL for v in worst.values()):
        raise CheckFailed("finite-difference mismatch")
    return EXIT_OK


COMMANDS = {
    "make-data": cmd_make_data,
    "corrupt-labels": cmd_corrupt_labels,
    "train": cmd_train,
    "classify": cmd_classify,
    "plan-timesteps": cmd_plan_timesteps,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "condense": cmd_condense,
    "report": cmd_report,
    "verify-pooled-score": cmd_verify_pooled_score,
    "verify-gradients": cmd_verify_gradients,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.iterations=200")
    parser = argparse.ArgumentParser(prog="impdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "plan-timesteps":
            p.add_argument("--delta", type=float, help="subinterval length")
        elif name == "classify":
            p.add_argument("--draws", type=int, help="noise draws per class")
        elif name == "condense":
            p.add_argument("--ipc", type=int, action="append", help="points per class (repeatable)")
        elif name == "report":
            p.add_argument("--points", type=int, default=200, help="test points in the diagnostic")
        elif name == "verify-pooled-score":
            p.add_argument("--n", type=int, default=1000, help="random (x, t, z) triples")
    return parser


def _error(kind: str, exc: Exception, code: int, extra: dict | None = None) -> int:
    record = {"error": kind, "message": str(exc), "exit_code": code, **(extra or {})}
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config, args.set, args.seed, args.out)
        run = Run(cfg)
        return COMMANDS[args.command](run, args)
    except (ConfigError, CheckpointError, PlanError, FileNotFoundError) as exc:
        return _error("validation", exc, EXIT_VALIDATION)
    except NumericalError as exc:
        return _error("numerical", exc, EXIT_NUMERICAL, {"record": exc.record})
    except (PriorError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _error("numerical", exc, EXIT_NUMERICAL)
    except CheckFailed as exc:
        return _error("check", exc, EXIT_CHECK)


if __name__ == "__main__":
    sys.exit(main())


