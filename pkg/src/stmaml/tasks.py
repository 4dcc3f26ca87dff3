"""Few-shot task containers and synthetic task generators."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

FAMILIES = ("sinusoid", "line", "quadratic", "cubic", "quadratic_surface", "ripple")
LOSS_KINDS = ("squared_error", "bernoulli")

# coefficient ranges, U[low, high] per coefficient name
COEFFICIENT_RANGES = {
    "sinusoid": {"a": (0.1, 5.0), "b": (0.0, 2 * np.pi), "w": (0.8, 1.2)},
    "line": {"a": (-3.0, 3.0), "b": (-3.0, 3.0)},
    "quadratic": {"a": (-0.2, 0.2), "b": (-2.0, 2.0), "c": (-3.0, 3.0)},
    "cubic": {"a": (-0.1, 0.1), "b": (-0.2, 0.2), "c": (-2.0, 2.0), "d": (-3.0, 3.0)},
    "quadratic_surface": {"a": (-1.0, 1.0), "b": (-1.0, 1.0)},
    "ripple": {"a": (-0.2, 0.2), "b": (-3.0, 3.0)},
}
# families that only read x1; their x2 is pinned to 1
ONE_INPUT = {"sinusoid", "line", "quadratic", "cubic"}
X_RANGE = (0.0, 5.0)


@dataclass
class Task:
    x_tr: np.ndarray
    y_tr: np.ndarray
    x_te: np.ndarray
    y_te: np.ndarray
    loss_kind: str = "squared_error"
    # diagnostic only, never read by the learners
    family_id: int = -1

    def __post_init__(self):
        self.x_tr = np.atleast_2d(np.asarray(self.x_tr, dtype=np.float64))
        self.x_te = np.asarray(self.x_te, dtype=np.float64).reshape(-1, self.x_tr.shape[1])
        self.y_tr = np.asarray(self.y_tr, dtype=np.float64).reshape(len(self.x_tr), -1)
        self.y_te = np.asarray(self.y_te, dtype=np.float64).reshape(len(self.x_te), self.y_tr.shape[1])
        if len(self.x_tr) < 1:
            raise ValueError("a task needs at least one training example")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    @property
    def d_in(self) -> int:
        return self.x_tr.shape[1]

    @property
    def d_out(self) -> int:
        return self.y_tr.shape[1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "x_tr": self.x_tr.tolist(),
                "y_tr": self.y_tr.tolist(),
                "x_te": self.x_te.tolist(),
                "y_te": self.y_te.tolist(),
                "loss_kind": self.loss_kind,
                "family_id": int(self.family_id),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Task":
        d = json.loads(line)
        return cls(
            np.asarray(d["x_tr"]),
            np.asarray(d["y_tr"]),
            np.asarray(d["x_te"]),
            np.asarray(d["y_te"]),
            d.get("loss_kind", "squared_error"),
            d.get("family_id", -1),
        )


@dataclass
class EpisodeConfig:
    shots: int = 10
    queries: int = 100
    noise_std: float = 0.3
    families: tuple = FAMILIES
    seed: int = 0

    def __post_init__(self):
        self.families = tuple(self.families)
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.queries < 0:
            raise ValueError("queries must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.families:
            raise ValueError("at least one family is required")
        for f in self.families:
            if f not in FAMILIES:
                raise ValueError(f"unknown function family {f!r}; choose from {FAMILIES}")


def family_function(family: str, coeffs: dict, x: np.ndarray) -> np.ndarray:
    """Noiseless output of ``family`` at inputs ``x`` ([n x 2])."""
    x1, x2 = x[:, 0], x[:, 1]
    c = coeffs
    if family == "sinusoid":
        return c["a"] * np.sin(c["w"] * x1 + c["b"])
    if family == "line":
        return c["a"] * x1 + c["b"]
    if family == "quadratic":
        return c["a"] * x1**2 + c["b"] * x1 + c["c"]
    if family == "cubic":
        return c["a"] * x1**3 + c["b"] * x1**2 + c["c"] * x1 + c["d"]
    if family == "quadratic_surface":
        return c["a"] * x1**2 + c["b"] * x2**2
    if family == "ripple":
        return np.sin(-c["a"] * (x1**2 + x2**2)) + c["b"]
    raise ValueError(f"unknown function family {family!r}")


def sample_coefficients(family: str, rng: np.random.Generator) -> dict:
    if family not in COEFFICIENT_RANGES:
        raise ValueError(f"unknown function family {family!r}")
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in COEFFICIENT_RANGES[family].items()}


def sample_inputs(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.uniform(*X_RANGE, size=(n, 2))
    if family in ONE_INPUT:
        x[:, 1] = 1.0
    return x


def make_regression_task(
    family: str,
    coeffs: dict,
    shots: int,
    queries: int,
    noise_std: float,
    rng: np.random.Generator,
) -> Task:
    x = sample_inputs(family, shots + queries, rng)
    y = family_function(family, coeffs, x)
    if noise_std > 0:
        y = y + rng.normal(0.0, noise_std, size=y.shape)
    return Task(
        x[:shots],
        y[:shots, None],
        x[shots:],
        y[shots:, None],
        "squared_error",
        FAMILIES.index(family),
    )


def sample_2d_regression_task(cfg: EpisodeConfig, rng: np.random.Generator) -> Task:
    """Draw a family uniformly from ``cfg.families`` and one task from it."""
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    coeffs = sample_coefficients(family, rng)
    return make_regression_task(family, coeffs, cfg.shots, cfg.queries, cfg.noise_std, rng)


def task_rng(base_seed: int, index: int) -> np.random.Generator:
    """Independent generator for task ``index`` of a stream seeded by ``base_seed``."""
    return np.random.default_rng([int(base_seed), int(index)])


def sample_episode_batch(cfg: EpisodeConfig, batch_size: int, rng) -> list[Task]:
    """``batch_size`` independent regression tasks.

    ``rng`` may be a Generator or an integer seed; each task gets its own
    derived stream so batches can also be produced in parallel.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    base = int(rng.integers(2**63 - 1))
    return [sample_2d_regression_task(cfg, task_rng(base, i)) for i in range(batch_size)]


def pixel_coordinates(height: int = 28, width: int = 28) -> np.ndarray:
    """Row-major ``[row, col]`` coordinates scaled to [0, 1]."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    return coords / np.array([max(height - 1, 1), max(width - 1, 1)])


def sample_image_completion_task(image, shots: int, rng: np.random.Generator, family_id: int = -1) -> Task:
    """Observe ``shots`` random pixels of ``image``; the rest form the test split."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    n = image.size
    if not 1 <= shots <= n:
        raise ValueError(f"shots must lie in [1, {n}], got {shots}")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("pixel intensities must lie in [0, 1]")
    coords = pixel_coordinates(*image.shape)
    values = image.reshape(-1, 1)
    order = rng.permutation(n)
    tr, te = order[:shots], order[shots:]
    return Task(coords[tr], values[tr], coords[te], values[te], "bernoulli", family_id)


def write_tasks_jsonl(tasks: Iterable[Task], path) -> None:
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(t.to_json() + "\n")


def read_tasks_jsonl(path) -> list[Task]:
    with open(path) as fh:
        return [Task.from_json(line) for line in fh if line.strip()]
