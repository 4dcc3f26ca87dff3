"""scikit-learn style wrappers around the meta-learners.

A meta-learner is fitted on a collection of tasks rather than on one
``(X, y)`` pair, so ``fit`` takes a list of tasks. Prediction needs the
support set of the new task alongside the query inputs::

    est = STMAMLRegressor(n_iterations=200).fit(tasks)
    y_hat = est.predict(X_support, y_support, X_query)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .engine import (
    Optimizer,
    TrainingConfig,
    init_maml,
    init_stmaml,
    maml_test_adapt,
    maml_train_step,
    meta_test_adapt,
    meta_train_step,
    select_best,
)
from .tasks import Task


def _as_task(obj) -> Task:
    if isinstance(obj, Task):
        return obj
    if len(obj) != 4:
        raise ValueError("a task is a Task or a tuple (X_support, y_support, X_query, y_query)")
    x_tr, y_tr = check_X_y(obj[0], obj[1], multi_output=True, y_numeric=True)
    x_te, y_te = check_X_y(obj[2], obj[3], multi_output=True, y_numeric=True)
    return Task(x_tr, y_tr, x_te, y_te)


class _MetaRegressor(BaseEstimator):
    """Shared fitting loop; subclasses provide the model and one training step."""

    def _training_config(self) -> TrainingConfig:
        return TrainingConfig(
            gamma1=self.gamma1,
            gamma2=self.gamma2,
            inner_steps=self.inner_steps,
            batch_tasks=self.batch_tasks,
            iterations=self.n_iterations,
            seed=self.random_state,
            optimizer="adam",
            clip_norm=self.clip_norm,
            **self._extra_config(),
        )

    def _extra_config(self) -> dict:
        return {}

    def fit(self, tasks, y=None):
        """Meta-train on ``tasks``, a list of Task objects or 4-tuples."""
        tasks = [_as_task(t) for t in tasks]
        if not tasks:
            raise ValueError("fit needs at least one task")
        d_in, d_out = tasks[0].d_in, tasks[0].d_out
        if any(t.d_in != d_in or t.d_out != d_out for t in tasks):
            raise ValueError("all tasks must share input and output dimensions")
        cfg = self._training_config()
        params = self._init(d_in, d_out)
        opt = Optimizer(cfg.gamma2, cfg.optimizer)
        rng = np.random.default_rng(self.random_state)
        self.loss_curve_ = []
        for step in range(self.n_iterations):
            idx = rng.choice(len(tasks), size=min(cfg.batch_tasks, len(tasks)), replace=False)
            batch = [tasks[i] for i in idx]
            params, met = self._step(params, batch, cfg, np.random.default_rng([self.random_state, step]), opt)
            self.loss_curve_.append(met["test_mse"])
        self.params_ = params
        self.n_features_in_ = d_in
        self.n_outputs_ = d_out
        self.n_iter_ = self.n_iterations
        return self

    def _query_task(self, X_support, y_support, X_query) -> tuple[Task, bool]:
        check_is_fitted(self, "params_")
        X_support, y_support = check_X_y(X_support, y_support, multi_output=True, y_numeric=True)
        X_query = check_array(X_query)
        if X_support.shape[1] != self.n_features_in_ or X_query.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features")
        flat = y_support.ndim == 1
        y_q = np.zeros((len(X_query), self.n_outputs_))
        return Task(X_support, y_support, X_query, y_q), flat

    def predict(self, X_support, y_support, X_query):
        """Adapt on the support set and predict the query inputs."""
        task, flat = self._query_task(X_support, y_support, X_query)
        pred = self._adapted(task).predictions
        return pred[:, 0] if flat else pred

    def score(self, X_support, y_support, X_query, y_query):
        """R^2 of the adapted predictions on the query set."""
        return r2_score(y_query, self.predict(X_support, y_support, X_query))


class MAMLRegressor(_MetaRegressor):
    """Model-agnostic meta-learning with a ReLU network.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths of the learner.
    inner_steps, gamma1 : int, float
        Number and rate of support-set gradient steps.
    gamma2 : float
        Adam learning rate of the outer loop.
    n_iterations, batch_tasks : int
        Outer steps and tasks per step.
    clip_norm : float or None
        Global norm limit on each meta-gradient.
    random_state : int
    """

    def __init__(self, hidden=(40, 40), inner_steps=5, gamma1=0.001, gamma2=1e-3,
                 n_iterations=1000, batch_tasks=25, clip_norm=10.0, random_state=0):
        self.hidden = hidden
        self.inner_steps = inner_steps
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.n_iterations = n_iterations
        self.batch_tasks = batch_tasks
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _init(self, d_in, d_out):
        return init_maml(d_in, d_out, tuple(self.hidden), self.random_state)

    def _step(self, params, batch, cfg, rng, opt):
        return maml_train_step(params, batch, cfg, opt)

    def _adapted(self, task):
        return maml_test_adapt(self.params_, task, self._training_config())


class STMAMLRegressor(_MetaRegressor):
    """Meta-learner whose initialization is tailored by a task latent.

    Takes the parameters of :class:`MAMLRegressor` plus the latent and
    encoder sizes. ``n_samples`` latents are drawn from the prior at
    prediction time; ``predict`` keeps the one that fits the support set
    best, ``sample_predictions`` returns all of them.
    """

    def __init__(self, hidden=(40, 40), encoder_hidden=(80, 80), head_hidden=(80,), d_z=40, d_h=10,
                 inner_steps=5, gamma1=0.001, gamma2=1e-3, kl_weight=1.0, n_iterations=1000,
                 batch_tasks=25, clip_norm=10.0, n_samples=10, random_state=0):
        self.hidden = hidden
        self.encoder_hidden = encoder_hidden
        self.head_hidden = head_hidden
        self.d_z = d_z
        self.d_h = d_h
        self.inner_steps = inner_steps
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.kl_weight = kl_weight
        self.n_iterations = n_iterations
        self.batch_tasks = batch_tasks
        self.clip_norm = clip_norm
        self.n_samples = n_samples
        self.random_state = random_state

    def _extra_config(self):
        return {"kl_weight": self.kl_weight}

    def _init(self, d_in, d_out):
        return init_stmaml(d_in, d_out, tuple(self.hidden), tuple(self.encoder_hidden),
                           tuple(self.head_hidden), self.d_z, self.d_h, self.random_state)

    def _step(self, params, batch, cfg, rng, opt):
        return meta_train_step(params, batch, cfg, rng, opt)

    def _samples(self, task):
        rng = np.random.default_rng(self.random_state)
        return meta_test_adapt(self.params_, task, self.n_samples, self._training_config(), rng)

    def _adapted(self, task):
        return select_best(self._samples(task))

    def sample_predictions(self, X_support, y_support, X_query):
        """Predictions of every latent sample, shape ``(n_samples, n_query[, d_out])``."""
        task, flat = self._query_task(X_support, y_support, X_query)
        preds = np.stack([s.predictions for s in self._samples(task)])
        return preds[..., 0] if flat else preds
