"""scikit-learn style front ends for the network and grid value solvers.

Both estimators map query rows ``(t, x_1, ..., x_n)`` to values, so they can
be scored against each other or dropped into sklearn tooling. ``fit`` takes
no data: the problem definition fully determines the target.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .analysis import GridValue, NetworkValue
from .gridoracle import GridSpec, extract_brt, solve_hji
from .problem import ProblemSpec
from .sirennet import Checkpoint, NetworkArch
from .training import TrainConfig, fine_tune, train


def check_queries(X, problem: ProblemSpec):
    """Validate query rows; returns ``(t, x)``."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if X.shape[1] != problem.n_state + 1:
        raise ValueError(f"expected {problem.n_state + 1} columns (t, x...), got {X.shape[1]}")
    t = X[:, 0]
    if np.any(t < -1e-12) or np.any(t > problem.horizon_T + 1e-12):
        raise ValueError("query times must lie in [0, T]")
    return t, X[:, 1:]


class DeepReachRegressor(RegressorMixin, BaseEstimator):
    """Sine-network value function trained on the sup-norm HJI residual.

    Parameters mirror :class:`NetworkArch` and :class:`TrainConfig`;
    ``random_state`` seeds both initialisation and sampling.
    """

    def __init__(
        self,
        problem=None,
        hidden_widths=(64, 64),
        omega0_first=30.0,
        omega0_hidden=1.0,
        samples_per_step=2048,
        lam=150.0,
        pretrain_steps=500,
        curriculum_steps=4500,
        post_steps=1000,
        lr=1e-4,
        loss_reduction="max",
        checkpoint_every=500,
        terminal_fraction=0.1,
        random_state=0,
    ):
        self.problem = problem
        self.hidden_widths = hidden_widths
        self.omega0_first = omega0_first
        self.omega0_hidden = omega0_hidden
        self.samples_per_step = samples_per_step
        self.lam = lam
        self.pretrain_steps = pretrain_steps
        self.curriculum_steps = curriculum_steps
        self.post_steps = post_steps
        self.lr = lr
        self.loss_reduction = loss_reduction
        self.checkpoint_every = checkpoint_every
        self.terminal_fraction = terminal_fraction
        self.random_state = random_state

    def _problem(self):
        return self.problem if self.problem is not None else ProblemSpec()

    def _arch(self):
        return NetworkArch(
            in_dim=self._problem().n_state + 1,
            hidden_widths=tuple(self.hidden_widths),
            omega0_first=self.omega0_first,
            omega0_hidden=self.omega0_hidden,
        )

    def _train_config(self):
        return TrainConfig(
            samples_per_step=self.samples_per_step,
            lam=self.lam,
            pretrain_steps=self.pretrain_steps,
            curriculum_steps=self.curriculum_steps,
            post_steps=self.post_steps,
            lr=self.lr,
            seed=int(self.random_state or 0),
            loss_reduction=self.loss_reduction,
            checkpoint_every=self.checkpoint_every,
            terminal_fraction=self.terminal_fraction,
        )

    def fit(self, X=None, y=None, emit=None):
        result = train(self._problem(), self._arch(), self._train_config(), emit=emit)
        self._set_result(result)
        return self

    def _set_result(self, result):
        self.checkpoint_ = result.checkpoint
        self.log_ = result.log
        self.checkpoints_ = result.checkpoints
        self.n_steps_ = len(result.log)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint):
        cfg = ckpt.meta.get("train", {})
        est = cls(
            problem=ckpt.problem,
            hidden_widths=ckpt.arch.hidden_widths,
            omega0_first=ckpt.arch.omega0_first,
            omega0_hidden=ckpt.arch.omega0_hidden,
            **{k: v for k, v in cfg.items() if k not in ("seed",)},
            random_state=cfg.get("seed", 0),
        )
        est.checkpoint_ = ckpt
        est.log_ = []
        est.checkpoints_ = [ckpt]
        est.n_steps_ = int(ckpt.meta.get("step", 0))
        return est

    def fine_tune(self, steps, **overrides):
        """Continue from the fitted checkpoint with max-reduction loss."""
        check_is_fitted(self, "checkpoint_")
        self._set_result(fine_tune(self.checkpoint_, steps, overrides))
        return self

    def predict(self, X):
        check_is_fitted(self, "checkpoint_")
        t, x = check_queries(X, self.checkpoint_.problem)
        return NetworkValue(self.checkpoint_).value(t, x)

    def predict_derivatives(self, X):
        """EvalBundle with value, dV/dt and grad_x V at each query row."""
        check_is_fitted(self, "checkpoint_")
        t, x = check_queries(X, self.checkpoint_.problem)
        return NetworkValue(self.checkpoint_).evaluate(t, x)

    def value_source(self):
        check_is_fitted(self, "checkpoint_")
        return NetworkValue(self.checkpoint_)


class HJIGridSolver(RegressorMixin, BaseEstimator):
    """Lax-Friedrichs grid solution queried by multilinear interpolation."""

    def __init__(self, problem=None, grid_points=31, t_samples=(1.0, 0.7, 0.0), cfl=0.5, dissipation="local"):
        self.problem = problem
        self.grid_points = grid_points
        self.t_samples = t_samples
        self.cfl = cfl
        self.dissipation = dissipation

    def fit(self, X=None, y=None):
        problem = self.problem if self.problem is not None else ProblemSpec()
        self.grid_ = GridSpec.for_problem(problem, self.grid_points)
        self.fields_ = solve_hji(problem, self.grid_, self.t_samples, self.cfl, self.dissipation)
        self.problem_ = problem
        return self

    def predict(self, X):
        check_is_fitted(self, "fields_")
        t, x = check_queries(X, self.problem_)
        return self.value_source().value(t, x)

    def value_source(self):
        check_is_fitted(self, "fields_")
        return GridValue(self.fields_, self.grid_, self.problem_)

    def brt(self, t):
        """BRT mask of the slice at time ``t`` (must be one of ``t_samples``)."""
        check_is_fitted(self, "fields_")
        for f in self.fields_:
            if np.isclose(f.time, t):
                return extract_brt(f)
        raise KeyError(f"no slice at t={t}")
