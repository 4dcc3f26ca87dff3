"""Training / evaluation harness: configs, task sources, checkpoints, reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import gsod, idx
from .engine import (
    Optimizer,
    StMamlParams,
    TrainingConfig,
    DivergenceError,
    config_hash,
    init_maml,
    init_stmaml,
    maml_test_adapt,
    maml_train_step,
    meta_test_adapt,
    meta_train_step,
    params_from_json,
    params_to_json,
    select_best,
)
from .tasks import (
    EpisodeConfig,
    Task,
    family_function,
    make_regression_task,
    sample_2d_regression_task,
    sample_coefficients,
    sample_image_completion_task,
    task_rng,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("regression2d", "weather", "image_completion")
ALGORITHMS = ("maml", "stmaml")


@dataclass
class ModelConfig:
    hidden: tuple = (40, 40)
    encoder_hidden: tuple = (80, 80)
    head_hidden: tuple = (80,)
    d_z: int = 40
    d_h: int = 10


@dataclass
class ExperimentConfig:
    experiment: str = "regression2d"
    algorithm: str = "stmaml"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    episode: EpisodeConfig = field(default_factory=lambda: EpisodeConfig(queries=40))
    model: ModelConfig = field(default_factory=ModelConfig)
    # 0 draws fresh training tasks every step; otherwise a fixed pool is reused
    task_pool: int = 0
    eval_tasks: int = 1000
    eval_samples: int = 10
    eval_shots: int | None = None
    eval_queries: int = 100
    eval_noise_std: float | None = None
    eval_seed: int = 12345
    output_dir: str = "runs/default"
    checkpoint_every: int = 100
    gsod_dir: str | None = None
    idx_path: str | None = None
    split_train: int = 42000
    split_val: int = 5000
    split_test: int = 1000
    # learner-side scaling of weather inputs and targets with training-split
    # statistics; evaluation losses are mapped back to degrees F squared
    weather_standardize: bool = True
    image_train: int = 500

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.eval_tasks < 1:
            raise ValueError("eval_tasks must be >= 1")
        if self.experiment == "weather" and not (self.gsod_dir and Path(self.gsod_dir).is_dir()):
            raise ValueError(f"weather experiments need an existing gsod_dir, got {self.gsod_dir!r}")
        if self.experiment == "image_completion" and not (self.idx_path and Path(self.idx_path).exists()):
            raise ValueError(f"image completion needs an existing idx_path, got {self.idx_path!r}")

    # ---- flat dotted-key (de)serialization
    def to_flat(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    out[f"{k}.{kk}"] = list(vv) if isinstance(vv, tuple) else vv
            else:
                out[k] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Build from ``{"training.gamma1": 0.01, ...}``; nested dicts also work."""
        flat = _flatten(flat)
        cur = base.to_flat() if base else _defaults_flat()
        unknown = [k for k in flat if k not in cur]
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cur.update(flat)
        sub = {"training": TrainingConfig, "episode": EpisodeConfig, "model": ModelConfig}
        parts: dict = {name: {} for name in sub}
        top = {}
        for k, v in cur.items():
            head, _, rest = k.partition(".")
            if rest:
                parts[head][rest] = tuple(v) if isinstance(v, list) else v
            else:
                top[k] = v
        for name, klass in sub.items():
            top[name] = klass(**parts[name])
        return cls(**top)

    def hash(self) -> str:
        flat = self.to_flat()
        flat.pop("output_dir")
        return config_hash(flat)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _defaults_flat() -> dict:
    # bypass path checks on the default object
    obj = object.__new__(ExperimentConfig)
    for f in fields(ExperimentConfig):
        setattr(obj, f.name, f.default_factory() if callable(f.default_factory) else f.default)
    return ExperimentConfig.to_flat(obj)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """defaults < JSON file < overrides."""
    flat = {}
    if path:
        with open(path) as fh:
            flat.update(_flatten(json.load(fh)))
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_flat(flat)


# ------------------------------------------------------------- task sources


class TaskSource:
    """Training batches and evaluation tasks for one experiment."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.scaling = None
        # multiplies evaluation losses back into the units of the raw targets
        self.loss_scale = 1.0
        ep = cfg.episode
        seed = cfg.training.seed
        if cfg.experiment == "regression2d":
            self.d_in, self.d_out = 2, 1
            self.pool = [sample_2d_regression_task(ep, task_rng(seed, i)) for i in range(cfg.task_pool)]
        elif cfg.experiment == "weather":
            self.d_in, self.d_out = 1 + len(gsod.FEATURE_NAMES), 1
            files = gsod.load_gsod_dir(cfg.gsod_dir)
            if not files:
                raise ValueError(f"no eligible station-year files under {cfg.gsod_dir}")
            self.train_files, self.val_files, self.test_files = gsod.split_files(
                files, seed, cfg.split_train, cfg.split_val, cfg.split_test
            )
            self.pool = []
            if cfg.weather_standardize:
                arrays = [f.arrays() for f in self.train_files]
                xs = np.concatenate([a[0] for a in arrays])
                ys = np.concatenate([a[1] for a in arrays])
                x_std = xs.std(axis=0)
                self.scaling = (xs.mean(axis=0), np.where(x_std > 0, x_std, 1.0), float(ys.mean()), float(ys.std()))
                self.loss_scale = self.scaling[3] ** 2
        else:
            self.d_in, self.d_out = 2, 1
            images = idx.load_images(cfg.idx_path)
            n_train = min(cfg.image_train, len(images) - 1)
            self.train_images, self.test_images = images[:n_train], images[n_train:]
            self.pool = []

    def train_batch(self, step: int) -> list[Task]:
        cfg, ep = self.cfg, self.cfg.episode
        m = cfg.training.batch_tasks
        rng = np.random.default_rng([cfg.training.seed, step, 0])
        if self.pool:
            pick = rng.choice(len(self.pool), size=m, replace=len(self.pool) < m)
            return [self.pool[i] for i in pick]
        if cfg.experiment == "regression2d":
            base = int(rng.integers(2**62))
            return [sample_2d_regression_task(ep, task_rng(base, i)) for i in range(m)]
        if cfg.experiment == "weather":
            files = [self.train_files[i] for i in rng.integers(len(self.train_files), size=m)]
            return [self._scaled(gsod.sample_weather_task(f, ep.shots, ep.queries, rng)) for f in files]
        imgs = rng.integers(len(self.train_images), size=m)
        return [sample_image_completion_task(self.train_images[i], ep.shots, rng) for i in imgs]

    def eval_tasks(self, n: int | None = None, shots: int | None = None, seed: int | None = None) -> list[Task]:
        cfg = self.cfg
        n = n or cfg.eval_tasks
        seed = cfg.eval_seed if seed is None else seed
        shots = shots or cfg.eval_shots or cfg.episode.shots
        rng = np.random.default_rng(seed)
        if cfg.experiment == "regression2d":
            noise = cfg.episode.noise_std if cfg.eval_noise_std is None else cfg.eval_noise_std
            ep = replace(cfg.episode, shots=shots, queries=cfg.eval_queries, noise_std=noise)
            return [sample_2d_regression_task(ep, task_rng(seed, i)) for i in range(n)]
        if cfg.experiment == "weather":
            files = self.test_files or self.val_files or self.train_files
            return [
                self._scaled(gsod.sample_weather_task(files[i % len(files)], shots, cfg.eval_queries, rng))
                for i in range(n)
            ]
        imgs = self.test_images if len(self.test_images) else self.train_images
        return [sample_image_completion_task(imgs[i % len(imgs)], shots, rng) for i in range(n)]

    def _scaled(self, task: Task) -> Task:
        if self.scaling is None:
            return task
        xm, xs, ym, ys = self.scaling
        return Task((task.x_tr - xm) / xs, (task.y_tr - ym) / ys, (task.x_te - xm) / xs, (task.y_te - ym) / ys,
                    task.loss_kind, task.family_id)


def init_model(cfg: ExperimentConfig, source: TaskSource):
    m = cfg.model
    if cfg.algorithm == "maml":
        return init_maml(source.d_in, source.d_out, m.hidden, cfg.training.seed)
    return init_stmaml(
        source.d_in, source.d_out, m.hidden, m.encoder_hidden, m.head_hidden, m.d_z, m.d_h, cfg.training.seed
    )


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, cfg: ExperimentConfig, step: int, optimizer: Optimizer) -> Path:
    header = {
        "algorithm": cfg.algorithm,
        "config": cfg.to_flat(),
        "config_hash": cfg.hash(),
        "step": step,
        "optimizer": optimizer.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(params_to_json(params, header))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """``(params, header)`` from a checkpoint file."""
    return params_from_json(Path(path).read_text())


def check_dims(params, header: dict, cfg: ExperimentConfig, source: TaskSource) -> None:
    expect = init_model(cfg, source)
    got = {k: v.shape for k, v in params.to_arrays().items()}
    want = {k: v.shape for k, v in expect.to_arrays().items()}
    if got != want:
        diff = sorted(k for k in set(got) | set(want) if got.get(k) != want.get(k))
        raise ValueError(f"checkpoint does not match config dimensions: {', '.join(diff)}")


# ----------------------------------------------------------------- training

METRIC_FIELDS = ("step", "elbo", "kl", "train_mse", "test_mse")


def _fmt(v) -> str:
    return repr(float(v)) if not isinstance(v, int) else str(v)


def run_train(cfg: ExperimentConfig, resume_from=None) -> Path:
    """Train for ``cfg.training.iterations`` outer steps; return the final checkpoint.

    Writes ``metrics.csv`` and ``checkpoints/step_*.json`` under
    ``cfg.output_dir``. A diverging loss aborts the run with the last good
    checkpoint left in place.
    """
    out = Path(cfg.output_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    source = TaskSource(cfg)
    tc = cfg.training
    optimizer = Optimizer(tc.gamma2, tc.optimizer)
    metrics_path = out / "metrics.csv"

    if resume_from is not None:
        params, header = load_checkpoint(resume_from)
        check_dims(params, header, cfg, source)
        shapes = {k: v.shape for k, v in params.to_arrays().items()}
        optimizer.load_state_dict(header["optimizer"], shapes)
        start = int(header["step"])
        _truncate_metrics(metrics_path, start)
    else:
        params = init_model(cfg, source)
        start = 0
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)

    last = save_checkpoint(ckpt_dir / f"step_{start:07d}.json", params, cfg, start, optimizer)
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for step in range(start, tc.iterations):
            batch = source.train_batch(step)
            rng = np.random.default_rng([tc.seed, step, 1])
            try:
                if cfg.algorithm == "stmaml":
                    params, met = meta_train_step(params, batch, tc, rng, optimizer)
                else:
                    params, met = maml_train_step(params, batch, tc, optimizer)
            except DivergenceError as exc:
                log.error("step %d diverged (%s); last good checkpoint is %s", step, exc, last)
                raise
            writer.writerow([step + 1] + [_fmt(met[k]) for k in METRIC_FIELDS[1:]])
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == tc.iterations:
                fh.flush()
                last = save_checkpoint(ckpt_dir / f"step_{done:07d}.json", params, cfg, done, optimizer)
                log.info("step %d: %s", done, met)
    final = out / "checkpoints" / "final.json"
    final.write_text(Path(last).read_text())
    return final


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",")[0]) <= step]
    path.write_text("".join(keep))


# --------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    mean_mse: float
    std_error: float
    mean_over_samples: float | None
    n_tasks: int
    records: list
    config_hash: str
    seed: int
    metric: str = "mse"
    wall_clock: float = 0.0

    def to_json(self) -> str:
        # wall-clock is excluded so equal configs give byte-identical reports
        d = asdict(self)
        d.pop("wall_clock")
        return json.dumps(d, sort_keys=True)


def evaluate(params, tasks: list[Task], cfg: ExperimentConfig, rng_seed: int, loss_scale: float = 1.0) -> EvalReport:
    t0 = time.time()
    tc = cfg.training
    records = []
    for i, task in enumerate(tasks):
        if isinstance(params, StMamlParams):
            samples = meta_test_adapt(params, task, cfg.eval_samples, tc, np.random.default_rng([rng_seed, i]))
            best = select_best(samples)
            rec = {
                "task": i,
                "loss": loss_scale * best.test_loss,
                "mean_over_samples": loss_scale * float(np.mean([s.test_loss for s in samples])),
            }
        else:
            res = maml_test_adapt(params, task, tc)
            rec = {"task": i, "loss": loss_scale * res.test_loss}
        rec["family_id"] = int(task.family_id)
        records.append(rec)
    losses = np.array([r["loss"] for r in records])
    over = [r["mean_over_samples"] for r in records if "mean_over_samples" in r]
    n = len(losses)
    return EvalReport(
        mean_mse=float(np.mean(losses)),
        std_error=float(np.std(losses, ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        mean_over_samples=float(np.mean(over)) if over else None,
        n_tasks=n,
        records=records,
        config_hash=cfg.hash(),
        seed=int(rng_seed),
        metric="bce" if tasks and tasks[0].loss_kind == "bernoulli" else "mse",
        wall_clock=time.time() - t0,
    )


def run_eval(checkpoint, cfg: ExperimentConfig | None = None, n_tasks=None, n_samples=None, write=True) -> EvalReport:
    """Evaluate a checkpoint on freshly sampled tasks."""
    params, header = load_checkpoint(checkpoint)
    if cfg is None:
        cfg = ExperimentConfig.from_flat(header["config"])
    if n_samples is not None:
        cfg = replace(cfg, eval_samples=n_samples)
    source = TaskSource(cfg)
    check_dims(params, header, cfg, source)
    tasks = source.eval_tasks(n_tasks)
    report = evaluate(params, tasks, cfg, cfg.eval_seed, source.loss_scale)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
    return report


def predictive_spread(params: StMamlParams, tasks: list[Task], cfg: ExperimentConfig, n_samples=10, seed=0) -> float:
    """Mean over tasks and query points of the std across sampled solutions."""
    spreads = []
    for i, task in enumerate(tasks):
        samples = meta_test_adapt(params, task, n_samples, cfg.training, np.random.default_rng([seed, i]))
        preds = np.stack([s.predictions[:, 0] for s in samples])
        spreads.append(float(np.mean(np.std(preds, axis=0))))
    return float(np.mean(spreads))


def dump_predictions(checkpoint, cfg: ExperimentConfig | None = None, n_tasks=4, n_samples=10, path=None, grid_size=50):
    """JSON lines with support points, the true curve and sampled predicted curves.

    One-input families use a 1-D grid over x1 with x2 fixed at 1; the two
    surfaces use a ``grid_size x grid_size`` grid over [0, 5]^2.
    """
    params, header = load_checkpoint(checkpoint)
    if cfg is None:
        cfg = ExperimentConfig.from_flat(header["config"])
    if cfg.experiment != "regression2d":
        raise ValueError("prediction dumps are only defined for regression2d")
    ep = cfg.episode
    shots = cfg.eval_shots or ep.shots
    noise = ep.noise_std if cfg.eval_noise_std is None else cfg.eval_noise_std
    path = Path(path or Path(cfg.output_dir) / "preds.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n_tasks):
        rng = task_rng(cfg.eval_seed + 1, i)
        family = ep.families[int(rng.integers(len(ep.families)))]
        coeffs = sample_coefficients(family, rng)
        task = make_regression_task(family, coeffs, shots, cfg.eval_queries, noise, rng)
        g = np.linspace(0.0, 5.0, grid_size)
        if family in ("quadratic_surface", "ripple"):
            a, b = np.meshgrid(g, g, indexing="ij")
            grid = np.stack([a.ravel(), b.ravel()], axis=1)
        else:
            grid = np.stack([g, np.ones_like(g)], axis=1)
        truth = family_function(family, coeffs, grid)
        if isinstance(params, StMamlParams):
            samples = meta_test_adapt(params, task, n_samples, cfg.training, np.random.default_rng([7, i]), x_query=grid)
            curves = [s.predictions[:, 0].tolist() for s in samples]
        else:
            curves = [maml_test_adapt(params, task, cfg.training, x_query=grid).predictions[:, 0].tolist()]
        lines.append(
            json.dumps(
                {
                    "task": i,
                    "family": family,
                    "coefficients": coeffs,
                    "x_train": task.x_tr.tolist(),
                    "y_train": task.y_tr[:, 0].tolist(),
                    "grid": grid.tolist(),
                    "y_true": truth.tolist(),
                    "samples": curves,
                },
                sort_keys=True,
            )
        )
    path.write_text("".join(ln + "\n" for ln in lines))
    return path


def read_predictions(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
