"""ST-MAML and MAML meta-learning on top of :mod:`stmaml.autodiff`.

A task is summarized by a latent ``z`` drawn from a Gaussian whose
parameters come from a permutation-invariant set encoder (per-pair MLP,
then mean over pairs, then mean/std heads). ``z`` tailors the learner's
output layer through a logistic gate and produces an augmented feature
vector ``h`` concatenated to every input. Both the tailored learner and
``h`` are adapted by a few gradient steps on the support set, and the
whole pipeline is trained end to end on a single-sample ELBO.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nn import (
    GaussianDiag,
    MlpParams,
    init_params,
    kl_diag_gaussians,
    mlp_forward,
    reparameterize_sample,
)
from .tasks import Task


class DivergenceError(FloatingPointError):
    """Raised when a loss becomes non-finite."""


Z_MODES = ("sample", "mean", "zero")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainingConfig:
    gamma1: float = 0.001  # inner learning rate
    gamma2: float = 1e-3  # outer learning rate
    inner_steps: int = 5
    batch_tasks: int = 25
    kl_weight: float = 1.0
    second_order: bool = True
    iterations: int = 1000
    seed: int = 0
    optimizer: str = "adam"
    # how z is produced during meta-training: posterior sample, posterior mean, or zeros
    z_mode: str = "sample"
    # parameter name prefixes excluded from outer updates
    frozen: tuple = ()
    # global-norm clipping of the meta-gradient; without it a few high-amplitude
    # tasks push the inner loop past its stability edge and training diverges
    clip_norm: float | None = 10.0

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        # zero rates are allowed: gamma1 = 0 is joint training, gamma2 = 0 a dry run
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma1 and gamma2 must be >= 0")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.batch_tasks < 1:
            raise ValueError("batch_tasks must be >= 1")
        if self.z_mode not in Z_MODES:
            raise ValueError(f"z_mode must be one of {Z_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


# --------------------------------------------------------------- parameters


@dataclass
class StMamlParams:
    """All meta-parameters.

    ``theta_b`` holds the hidden layers of the learner (ReLU after each),
    ``theta_c`` its final linear layer. The gate maps ``z`` to one logit per
    element of ``theta_c`` (weights row-major, then bias).
    """

    theta_b: MlpParams
    theta_c: MlpParams
    phi: MlpParams
    mu_head: MlpParams
    sigma_head: MlpParams
    w1: object  # [|theta_c| x d_z]
    w0: object  # [|theta_c|]
    beta1: object  # [d_h x d_z]
    beta0: object  # [d_h]

    MODULES = ("theta_b", "theta_c", "phi", "mu_head", "sigma_head")

    @property
    def d_z(self) -> int:
        return self.w1.shape[1]

    @property
    def d_h(self) -> int:
        return self.beta1.shape[0]

    @property
    def d_in(self) -> int:
        return self.learner_dims[0] - self.d_h

    @property
    def learner_dims(self) -> list[int]:
        return self.theta_b.dims + [self.theta_c.dims[-1]] if len(self.theta_b) else self.theta_c.dims

    def named_leaves(self) -> list[tuple[str, object]]:
        out = []
        for name in self.MODULES:
            mod = getattr(self, name)
            for i, (w, b) in enumerate(zip(mod.weights, mod.biases)):
                out += [(f"{name}.{i}.w", w), (f"{name}.{i}.b", b)]
        out += [("gate.w1", self.w1), ("gate.w0", self.w0)]
        out += [("feature.beta1", self.beta1), ("feature.beta0", self.beta0)]
        return out

    def with_leaves(self, leaves: Sequence) -> "StMamlParams":
        leaves = list(leaves)
        kw = {}
        pos = 0
        for name in self.MODULES:
            mod = getattr(self, name)
            n = 2 * len(mod)
            kw[name] = mod.with_leaves(leaves[pos : pos + n])
            pos += n
        kw["w1"], kw["w0"], kw["beta1"], kw["beta0"] = leaves[pos : pos + 4]
        return StMamlParams(**kw)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(_values(v)) for k, v in self.named_leaves()}

    def learner(self) -> MlpParams:
        return MlpParams(
            list(self.theta_b.weights) + list(self.theta_c.weights),
            list(self.theta_b.biases) + list(self.theta_c.biases),
            "relu",
        )


@dataclass
class MamlParams:
    """Plain MAML: one learner MLP and nothing else."""

    learner: MlpParams

    def named_leaves(self):
        return [
            (f"learner.{i}.{k}", v)
            for i, (w, b) in enumerate(zip(self.learner.weights, self.learner.biases))
            for k, v in (("w", w), ("b", b))
        ]

    def with_leaves(self, leaves):
        return MamlParams(self.learner.with_leaves(leaves))

    def to_arrays(self):
        return {k: np.array(_values(v)) for k, v in self.named_leaves()}


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x)


def init_stmaml(
    d_in: int,
    d_out: int = 1,
    hidden=(40, 40),
    encoder_hidden=(80, 80),
    head_hidden=(80,),
    d_z: int = 40,
    d_h: int = 10,
    seed: int = 0,
) -> StMamlParams:
    rng = np.random.default_rng(seed)
    hidden = list(hidden)
    if not hidden:
        raise ValueError("the learner needs at least one hidden layer")
    theta_b = init_params([d_in + d_h] + hidden, rng)
    theta_c = init_params([hidden[-1], d_out], rng)
    phi = init_params([d_in + d_out] + list(encoder_hidden), rng)
    d_r = phi.dims[-1]
    mu_head = init_params([d_r] + list(head_hidden) + [d_z], rng)
    sigma_head = init_params([d_r] + list(head_hidden) + [d_z], rng)
    n_c = (hidden[-1] + 1) * d_out
    bound = np.sqrt(6.0 / (n_c + d_z))
    w1 = rng.uniform(-bound, bound, size=(n_c, d_z))
    w0 = np.zeros(n_c)
    bound = np.sqrt(6.0 / (d_h + d_z)) if d_h else 0.0
    beta1 = rng.uniform(-bound, bound, size=(d_h, d_z))
    beta0 = np.zeros(d_h)
    return StMamlParams(theta_b, theta_c, phi, mu_head, sigma_head, w1, w0, beta1, beta0)


def init_maml(d_in: int, d_out: int = 1, hidden=(40, 40), seed: int = 0) -> MamlParams:
    rng = np.random.default_rng(seed)
    return MamlParams(init_params([d_in] + list(hidden) + [d_out], rng))


def watch(params, tape: Tape):
    """Copy of ``params`` whose leaves are fresh leaves on ``tape``."""
    return params.with_leaves([tape.watch(_values(v)) for _, v in params.named_leaves()])


# ---------------------------------------------------------- task encoding


def encode_pairs(phi: MlpParams, xs, ys) -> Tensor:
    """Row-wise encoding of each ``(x_j, y_j)`` pair: ``[n x d_r]``."""
    xs = xs if isinstance(xs, Tensor) else Tensor(xs)
    ys = ys if isinstance(ys, Tensor) else Tensor(ys)
    if xs.shape[0] < 1:
        raise ValueError("encode_pairs needs at least one pair")
    if xs.shape[0] != ys.shape[0]:
        raise ad.ShapeError(f"encode_pairs: {xs.shape[0]} inputs but {ys.shape[0]} targets")
    return mlp_forward(phi, ad.concat([xs, ys]))


def aggregate(r_rows: Tensor) -> Tensor:
    """Arithmetic mean over rows."""
    if r_rows.shape[0] == 0:
        raise ValueError("aggregate needs at least one row")
    return ad.mean(r_rows, axis=0)


def _latent(params: StMamlParams, r: Tensor) -> GaussianDiag:
    r = ad.reshape(r, (1, r.shape[0]))
    mu = ad.reshape(mlp_forward(params.mu_head, r), (params.d_z,))
    raw = ad.reshape(mlp_forward(params.sigma_head, r), (params.d_z,))
    return GaussianDiag.from_raw(mu, raw)


def prior_dist(params: StMamlParams, task: Task) -> GaussianDiag:
    """Latent distribution conditioned on the support set only."""
    return _latent(params, aggregate(encode_pairs(params.phi, task.x_tr, task.y_tr)))


def posterior_dist(params: StMamlParams, task: Task) -> GaussianDiag:
    """Latent distribution conditioned on support and query pairs together."""
    xs = np.concatenate([task.x_tr, task.x_te])
    ys = np.concatenate([task.y_tr, task.y_te])
    return _latent(params, aggregate(encode_pairs(params.phi, xs, ys)))


def prior_and_posterior(params: StMamlParams, task: Task) -> tuple[GaussianDiag, GaussianDiag]:
    # one encoder pass shared by both distributions
    k = len(task.x_tr)
    rows = encode_pairs(
        params.phi,
        np.concatenate([task.x_tr, task.x_te]),
        np.concatenate([task.y_tr, task.y_te]),
    )
    prior = _latent(params, aggregate(ad.getitem(rows, slice(0, k))))
    post = _latent(params, aggregate(rows)) if len(task.x_te) else prior
    return prior, post


# ------------------------------------------------------ knowledge tailoring


@dataclass
class KnowledgeSet:
    theta: MlpParams
    h: Tensor | None

    def leaves(self) -> list:
        return self.theta.leaves() + ([self.h] if self.h is not None else [])

    def with_leaves(self, leaves) -> "KnowledgeSet":
        leaves = list(leaves)
        n = 2 * len(self.theta)
        return KnowledgeSet(self.theta.with_leaves(leaves[:n]), leaves[n] if self.h is not None else None)


def gate_values(params: StMamlParams, z) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    logits = ad.matmul(params.w1, ad.reshape(z, (params.d_z, 1)))
    return ad.sigmoid(ad.add(ad.reshape(logits, (params.w1.shape[0],)), params.w0))


def tailor_init(params: StMamlParams, z) -> MlpParams:
    """Learner initialization with ``theta_c`` scaled elementwise by the gate."""
    gate = gate_values(params, z)
    pos = 0
    ws, bs = [], []
    for w, b in zip(params.theta_c.weights, params.theta_c.biases):
        nw, nb = w.shape[0] * w.shape[1], b.shape[0]
        gw = ad.reshape(ad.getitem(gate, slice(pos, pos + nw)), w.shape)
        gb = ad.getitem(gate, slice(pos + nw, pos + nw + nb))
        ws.append(ad.mul(w, gw))
        bs.append(ad.mul(b, gb))
        pos += nw + nb
    return MlpParams(
        list(params.theta_b.weights) + ws,
        list(params.theta_b.biases) + bs,
        "relu",
    )


def augment_input(params: StMamlParams, z) -> Tensor:
    """Initial augmented feature ``beta1 @ z + beta0``."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    hz = ad.matmul(params.beta1, ad.reshape(z, (params.d_z, 1)))
    return ad.add(ad.reshape(hz, (params.d_h,)), params.beta0)


def initial_knowledge(params: StMamlParams, z) -> KnowledgeSet:
    h = augment_input(params, z) if params.d_h else None
    return KnowledgeSet(tailor_init(params, z), h)


# ------------------------------------------------------------------ losses


def predict_raw(ks: KnowledgeSet, xs) -> Tensor:
    xs = xs if isinstance(xs, Tensor) else Tensor(xs)
    if ks.h is not None:
        hs = ad.broadcast_to(ks.h, (xs.shape[0], ks.h.shape[0]), axis=0)
        xs = ad.concat([xs, hs])
    return mlp_forward(ks.theta, xs)


def _per_element_loss(pred: Tensor, ys, loss_kind: str) -> Tensor:
    ys = ys if isinstance(ys, Tensor) else Tensor(ys)
    if loss_kind == "squared_error":
        return ad.square(ad.sub(pred, ys))
    if loss_kind == "bernoulli":
        # binary cross-entropy on logits
        return ad.sub(ad.softplus(pred), ad.mul(ys, pred))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def inner_loss(ks: KnowledgeSet, xs, ys, loss_kind: str = "squared_error") -> Tensor:
    """Mean per-example loss of the knowledge set on ``(xs, ys)``."""
    if len(xs) == 0:
        raise ValueError("inner_loss needs a non-empty split")
    loss = ad.mean(_per_element_loss(predict_raw(ks, xs), ys, loss_kind))
    if not np.isfinite(loss.values):
        raise DivergenceError("inner loss is not finite")
    return loss


def test_nll(ks: KnowledgeSet, xs, ys, loss_kind: str) -> Tensor:
    """Negative log-likelihood of the query set, summed over points.

    Regression uses a unit-variance Gaussian (constant dropped).
    """
    per = _per_element_loss(predict_raw(ks, xs), ys, loss_kind)
    if loss_kind == "squared_error":
        per = ad.mul(per, 0.5)
    return ad.sum(per)


def _on_tape(ks: KnowledgeSet) -> KnowledgeSet:
    """Put detached leaves on the tape the other leaves use (or a new one)."""
    leaves = ks.leaves()
    tapes = [v.node.tape for v in leaves if isinstance(v, Tensor) and v.node is not None]
    if len(tapes) == len(leaves):
        return ks
    tape = tapes[0] if tapes else Tape()
    return ks.with_leaves(
        v if isinstance(v, Tensor) and v.node is not None else tape.watch(_values(v)) for v in leaves
    )


def inner_adapt(ks0: KnowledgeSet, task: Task, cfg: TrainingConfig) -> KnowledgeSet:
    """``cfg.inner_steps`` gradient steps on the support loss.

    All learner parameters and the augmented feature are updated. With
    ``cfg.second_order`` the inner gradients stay on the tape so the result
    is differentiable with second-order terms.
    """
    ks = _on_tape(ks0) if cfg.inner_steps else ks0
    for step in range(cfg.inner_steps):
        try:
            loss = inner_loss(ks, task.x_tr, task.y_tr, task.loss_kind)
        except DivergenceError:
            raise DivergenceError(f"inner loss is not finite at step {step}") from None
        leaves = ks.leaves()
        grads = ad.grad(loss, leaves, create_graph=cfg.second_order)
        ks = ks.with_leaves(ad.sub(p, ad.mul(g, cfg.gamma1)) for p, g in zip(leaves, grads))
    return ks


class ElboTerms(NamedTuple):
    loss: Tensor  # negated ELBO
    nll: float
    kl: float
    test_mse: float
    train_mse: float


def _mse(ks: KnowledgeSet, xs, ys, loss_kind: str) -> float:
    if len(xs) == 0:
        return float("nan")
    with ad.no_record():
        pred = predict_raw(ks, xs).values
    if loss_kind == "bernoulli":
        pred = ad._sigmoid_values(pred)
    return float(np.mean((pred - ys) ** 2))


def elbo_terms(params: StMamlParams, task: Task, noise, cfg: TrainingConfig) -> ElboTerms:
    prior, post = prior_and_posterior(params, task)
    if cfg.z_mode == "zero":
        z = Tensor(np.zeros(params.d_z))
    elif cfg.z_mode == "mean":
        z = post.mean
    else:
        z = reparameterize_sample(post, noise)
    ks = inner_adapt(initial_knowledge(params, z), task, cfg)
    nll = test_nll(ks, task.x_te, task.y_te, task.loss_kind)
    kl = kl_diag_gaussians(post, prior)
    loss = ad.add(nll, ad.mul(kl, cfg.kl_weight))
    if not np.isfinite(loss.values):
        raise DivergenceError("ELBO is not finite")
    return ElboTerms(
        loss,
        float(nll.values),
        float(kl.values),
        _mse(ks, task.x_te, task.y_te, task.loss_kind),
        _mse(ks, task.x_tr, task.y_tr, task.loss_kind),
    )


def elbo_loss(params: StMamlParams, task: Task, noise, cfg: TrainingConfig) -> Tensor:
    """Single-sample negated ELBO: query NLL + kl_weight * KL(posterior || prior)."""
    return elbo_terms(params, task, noise, cfg).loss


def maml_terms(params: MamlParams, task: Task, cfg: TrainingConfig) -> ElboTerms:
    ks = inner_adapt(KnowledgeSet(params.learner, None), task, cfg)
    nll = test_nll(ks, task.x_te, task.y_te, task.loss_kind)
    if not np.isfinite(nll.values):
        raise DivergenceError("query loss is not finite")
    return ElboTerms(
        nll,
        float(nll.values),
        0.0,
        _mse(ks, task.x_te, task.y_te, task.loss_kind),
        _mse(ks, task.x_tr, task.y_tr, task.loss_kind),
    )


# -------------------------------------------------------------- optimizers


class Optimizer:
    """Outer-loop update rule over named numpy arrays."""

    def __init__(self, lr: float, kind: str = "sgd", beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {kind!r}")
        self.lr, self.kind = lr, kind
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict, grads: dict, frozen=()) -> dict:
        self.t += 1
        out = {}
        for name, value in arrays.items():
            g = grads.get(name)
            if g is None or any(name.startswith(p) for p in frozen):
                out[name] = value
                continue
            if self.kind == "sgd":
                out[name] = value - self.lr * g
                continue
            m = self.m.get(name, np.zeros_like(value))
            v = self.v.get(name, np.zeros_like(value))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[name] = value - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict, shapes: dict | None = None) -> None:
        self.kind, self.lr, self.t = state["kind"], state["lr"], state["t"]
        shapes = shapes or {}

        def arr(k, x):
            a = np.asarray(x, dtype=np.float64)
            return a.reshape(shapes[k]) if k in shapes else a

        self.m = {k: arr(k, x) for k, x in state["m"].items()}
        self.v = {k: arr(k, x) for k, x in state["v"].items()}


def _from_arrays(params, arrays: dict):
    return params.with_leaves([arrays[name] for name, _ in params.named_leaves()])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("STMAML_THREADS", "1")))
    except ValueError:
        return 1


def _batch_gradients(params, batch: Sequence[Task], per_task) -> tuple[dict, list[ElboTerms]]:
    """Average per-task gradients, reduced in task order."""
    names = [n for n, _ in params.named_leaves()]
    m = len(batch)

    def one(i):
        tape = Tape()
        p = watch(params, tape)
        terms = per_task(p, batch[i], i)
        leaves = [v for _, v in p.named_leaves()]
        grads = [g.values for g in ad.grad(ad.mul(terms.loss, 1.0 / m), leaves)]
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError(f"meta-gradient is not finite for task {i}")
        return grads, terms

    n_threads = min(_threads(), m)
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(one, range(m)))
    else:
        results = [one(i) for i in range(m)]

    total = [np.zeros_like(_values(v)) for _, v in params.named_leaves()]
    for grads, _ in results:
        for acc, g in zip(total, grads):
            acc += g
    return dict(zip(names, total)), [t for _, t in results]


def clip_gradients(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = np.sqrt(np.sum([np.sum(g * g) for g in grads.values()]))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def _metrics(terms: list[ElboTerms]) -> dict:
    return {
        "elbo": float(np.mean([-t.loss.values for t in terms])),
        "kl": float(np.mean([t.kl for t in terms])),
        "train_mse": float(np.mean([t.train_mse for t in terms])),
        "test_mse": float(np.mean([t.test_mse for t in terms])),
    }


def meta_train_step(
    params: StMamlParams,
    batch: Sequence[Task],
    cfg: TrainingConfig,
    rng: np.random.Generator,
    optimizer: Optimizer | None = None,
):
    """One outer update on the batch-averaged negated ELBO.

    Returns ``(new_params, metrics)``. Without an explicit optimizer the
    update is plain gradient descent with rate ``cfg.gamma2``.
    """
    if not batch:
        raise ValueError("batch must hold at least one task")
    noises = [rng.standard_normal(params.d_z) for _ in batch]
    grads, terms = _batch_gradients(
        params, batch, lambda p, task, i: elbo_terms(p, task, noises[i], cfg)
    )
    grads = clip_gradients(grads, cfg.clip_norm)
    optimizer = optimizer or Optimizer(cfg.gamma2, "sgd")
    new = optimizer.step(params.to_arrays(), grads, cfg.frozen)
    return _from_arrays(params, new), _metrics(terms)


def maml_train_step(
    params: MamlParams,
    batch: Sequence[Task],
    cfg: TrainingConfig,
    optimizer: Optimizer | None = None,
):
    """One outer MAML update: no encoder, gate, augmentation or KL."""
    if not batch:
        raise ValueError("batch must hold at least one task")
    grads, terms = _batch_gradients(params, batch, lambda p, task, i: maml_terms(p, task, cfg))
    grads = clip_gradients(grads, cfg.clip_norm)
    optimizer = optimizer or Optimizer(cfg.gamma2, "sgd")
    new = optimizer.step(params.to_arrays(), grads, cfg.frozen)
    return _from_arrays(params, new), _metrics(terms)


# --------------------------------------------------------------- meta-test


class SampleResult(NamedTuple):
    knowledge: KnowledgeSet
    predictions: np.ndarray
    test_loss: float
    train_loss: float
    z: np.ndarray


def _eval_loss(pred_raw: np.ndarray, ys: np.ndarray, loss_kind: str) -> float:
    if len(ys) == 0:
        return float("nan")
    if loss_kind == "bernoulli":
        return float(np.mean(np.logaddexp(0.0, pred_raw) - ys * pred_raw))
    return float(np.mean((pred_raw - ys) ** 2))


def _adapt_and_predict(ks0: KnowledgeSet, task: Task, cfg: TrainingConfig, z, x_query=None):
    # fresh tape: nothing here is differentiated w.r.t. meta-parameters
    tape = Tape()
    ks = ks0.with_leaves([tape.watch(_values(v)) for v in ks0.leaves()])
    ks = inner_adapt(ks, task, replace(cfg, second_order=False))
    ks = ks.with_leaves([Tensor(v.values) for v in ks.leaves()])
    with ad.no_record():
        tr = predict_raw(ks, task.x_tr).values
        xq = task.x_te if x_query is None else x_query
        te = predict_raw(ks, xq).values if len(xq) else np.zeros((0, task.d_out))
    pred = ad._sigmoid_values(te) if task.loss_kind == "bernoulli" else te
    test_loss = _eval_loss(te, task.y_te, task.loss_kind) if x_query is None else float("nan")
    return SampleResult(ks, pred, test_loss, _eval_loss(tr, task.y_tr, task.loss_kind), np.asarray(z))


def meta_test_adapt(
    params: StMamlParams,
    task: Task,
    n_samples: int,
    cfg: TrainingConfig,
    rng: np.random.Generator,
    x_query=None,
) -> list[SampleResult]:
    """Adapt ``n_samples`` solutions, each from a ``z`` drawn from the prior.

    ``rng=None`` uses the prior mean for every sample. ``x_query`` replaces
    the query inputs for prediction (the test loss is then NaN).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    with ad.no_record():
        prior = prior_dist(params, task)
        starts = []
        for _ in range(n_samples):
            noise = np.zeros(params.d_z) if rng is None else rng.standard_normal(params.d_z)
            z = reparameterize_sample(prior, noise)
            starts.append((initial_knowledge(params, z), z.values))
    return [_adapt_and_predict(ks0, task, cfg, z, x_query) for ks0, z in starts]


def select_best(samples: Sequence[SampleResult]) -> SampleResult:
    """The sample with the lowest support-set loss."""
    return min(samples, key=lambda s: s.train_loss)


def maml_test_adapt(params: MamlParams, task: Task, cfg: TrainingConfig, x_query=None) -> SampleResult:
    ks0 = KnowledgeSet(params.learner, None)
    return _adapt_and_predict(ks0, task, cfg, np.zeros(0), x_query)


# ------------------------------------------------------------- checkpoints


def config_hash(obj) -> str:
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def params_to_json(params, header: dict | None = None) -> str:
    """``{"header": ..., "params": {module: {layer: {"w", "b"}}}}``."""
    arrays = params.to_arrays()
    modules: dict = {}
    for name, value in arrays.items():
        *mod, leaf = name.split(".")
        if len(mod) == 1:  # gate / feature map: a single (w, b) pair
            mod.append("0")
            leaf = "w" if leaf in ("w1", "beta1") else "b"
        modules.setdefault(mod[0], {}).setdefault(mod[1], {})[leaf] = value.tolist()
    head = dict(header or {})
    head["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    if isinstance(params, StMamlParams):
        head.setdefault("algorithm", "stmaml")
        head.update(d_z=params.d_z, d_h=params.d_h, dims=params.learner_dims)
    else:
        head.setdefault("algorithm", "maml")
        head.update(dims=params.learner.dims)
    return json.dumps({"header": head, "params": modules}, sort_keys=True)


def params_from_json(text: str):
    """Inverse of :func:`params_to_json`; returns ``(params, header)``."""
    doc = json.loads(text)
    head, mods = doc["header"], doc["params"]
    shapes = head["shapes"]

    def leaf(mod, layer, key, name):
        return np.asarray(mods[mod][layer][key], dtype=np.float64).reshape(shapes[name])

    def mlp(mod):
        layers = sorted(mods.get(mod, {}), key=int)
        ws = [leaf(mod, i, "w", f"{mod}.{i}.w") for i in layers]
        bs = [leaf(mod, i, "b", f"{mod}.{i}.b") for i in layers]
        return MlpParams(ws, bs, "relu")

    if head["algorithm"] == "maml":
        return MamlParams(mlp("learner")), head
    params = StMamlParams(
        mlp("theta_b"),
        mlp("theta_c"),
        mlp("phi"),
        mlp("mu_head"),
        mlp("sigma_head"),
        leaf("gate", "0", "w", "gate.w1"),
        leaf("gate", "0", "b", "gate.w0"),
        leaf("feature", "0", "w", "feature.beta1"),
        leaf("feature", "0", "b", "feature.beta0"),
    )
    return params, head
