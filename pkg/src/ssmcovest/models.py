"""Dynamical and observation models, plus twin-data generation.

Two concrete systems are provided: a scalar first-order autoregression and
the cyclic Lorenz-96 system integrated with classical fourth-order
Runge-Kutta. Both are wrapped in the generic :class:`StateSpaceModel`
container used by every filter. All stochasticity (model and observation
noise) is added by callers; the maps here are deterministic and vectorized
over leading axes, so a whole particle ensemble propagates in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, DimensionTooSmall
from .numerics import mvn_sample


@dataclass(frozen=True)
class StateSpaceModel:
    """A deterministic dynamical model with an observation operator.

    Attributes
    ----------
    state_dim : int
        Dimension of the hidden state.
    obs_dim : int
        Dimension of the observation vector.
    propagate : callable
        Maps states of shape ``(..., state_dim)`` one assimilation interval
        forward, preserving shape.
    observe : callable
        Maps states of shape ``(..., state_dim)`` into observation space
        ``(..., obs_dim)``.
    obs_adjoint : callable
        The linear adjoint of the observation operator applied to
        observation-space vectors, ``v -> H^T v``; needed by gradient-based
        filters.
    """

    state_dim: int
    obs_dim: int
    propagate: Callable[[np.ndarray], np.ndarray]
    observe: Callable[[np.ndarray], np.ndarray]
    obs_adjoint: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Ar1Config:
    """Scalar autoregressive model ``x_k = coefficient * x_{k-1} + noise``."""

    coefficient: float = 0.8


@dataclass(frozen=True)
class Lorenz96Config:
    """Lorenz-96 integration settings.

    ``steps_per_cycle * dt`` is the assimilation interval: observations
    arrive once per cycle while the ODE is integrated with the finer step.
    """

    n_vars: int = 8
    forcing: float = 8.0
    dt: float = 0.005
    steps_per_cycle: int = 10

    def __post_init__(self):
        if self.n_vars < 4:
            raise DimensionTooSmall("Lorenz-96 needs at least 4 variables")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps_per_cycle < 1:
            raise ValueError("steps_per_cycle must be at least 1")

    @property
    def cycle_length(self):
        return self.steps_per_cycle * self.dt


def ar1_step(x, coefficient):
    """Deterministic part of the scalar AR(1) map: ``coefficient * x``."""
    return coefficient * x


def lorenz96_tendency(x, forcing):
    """Lorenz-96 time derivative with cyclic boundary conditions.

    Component ``n`` is ``x_{n-1} (x_{n+1} - x_{n-2}) - x_n + forcing`` with
    all indices modulo the state length. Accepts stacked states of shape
    ``(..., n_vars)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise DimensionTooSmall("Lorenz-96 needs at least 4 variables")
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    return xm1 * (xp1 - xm2) - x + forcing


def rk4_step(tendency, x, dt):
    """One classical fourth-order Runge-Kutta step of size `dt`."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = tendency(x)
    k2 = tendency(x + 0.5 * dt * k1)
    k3 = tendency(x + 0.5 * dt * k2)
    k4 = tendency(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz96_propagate(x, cfg):
    """Advance Lorenz-96 one assimilation cycle (`steps_per_cycle` RK4 steps)."""
    tendency = lambda state: lorenz96_tendency(state, cfg.forcing)
    for _ in range(cfg.steps_per_cycle):
        x = rk4_step(tendency, x, cfg.dt)
    return x


def ar1_model(cfg):
    """AR(1) :class:`StateSpaceModel` with identity observation."""
    if not isinstance(cfg, Ar1Config):
        cfg = Ar1Config(coefficient=float(cfg))
    nu = cfg.coefficient
    return StateSpaceModel(
        state_dim=1,
        obs_dim=1,
        propagate=lambda x: nu * np.asarray(x, dtype=float),
        observe=lambda x: np.asarray(x, dtype=float),
        obs_adjoint=lambda v: np.asarray(v, dtype=float),
    )


def lorenz96_model(cfg):
    """Lorenz-96 :class:`StateSpaceModel` with identity observation."""
    return StateSpaceModel(
        state_dim=cfg.n_vars,
        obs_dim=cfg.n_vars,
        propagate=lambda x: lorenz96_propagate(x, cfg),
        observe=lambda x: np.asarray(x, dtype=float),
        obs_adjoint=lambda v: np.asarray(v, dtype=float),
    )


def lorenz96_attractor_state(cfg, spinup_cycles=500, perturbation=0.01):
    """A state on the Lorenz-96 attractor.

    Starts from the unstable fixed point ``forcing * ones`` with a small
    perturbation on the first component and integrates `spinup_cycles`
    assimilation cycles without noise, so that twin-experiment truths start
    on the attractor rather than in a transient.
    """
    x = np.full(cfg.n_vars, cfg.forcing, dtype=float)
    x[0] += perturbation
    for _ in range(spinup_cycles):
        x = lorenz96_propagate(x, cfg)
    return x


def simulate_states(model, q_true, x0, n_cycles, rng):
    """Simulate the hidden state trajectory ``x_0 .. x_K``.

    ``x_k = propagate(x_{k-1}) + beta_k`` with ``beta_k ~ N(0, q_true)``
    drawn once per assimilation cycle.

    Returns
    -------
    ndarray, shape (n_cycles + 1, state_dim)
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.state_dim,):
        raise DimensionMismatch(f"x0 of shape {x0.shape}, state_dim {model.state_dim}")
    if q_true.dim != model.state_dim:
        raise DimensionMismatch("q_true dimension does not match the state")
    if n_cycles < 1:
        raise ValueError("n_cycles must be at least 1")
    states = np.empty((n_cycles + 1, model.state_dim))
    states[0] = x0
    noise = mvn_sample(np.zeros(model.state_dim), q_true, rng, n_cycles)
    for k in range(1, n_cycles + 1):
        states[k] = model.propagate(states[k - 1]) + noise[k - 1]
    return states


def observe_states(model, states, r_true, rng):
    """Observe states ``x_1 .. x_K`` with additive noise ``N(0, r_true)``.

    Parameters
    ----------
    states : ndarray, shape (n_cycles + 1, state_dim)
        Trajectory including the initial state, as from
        :func:`simulate_states`; the initial state is not observed.

    Returns
    -------
    ndarray, shape (n_cycles, obs_dim)
    """
    if r_true.dim != model.obs_dim:
        raise DimensionMismatch("r_true dimension does not match the observation space")
    n_cycles = states.shape[0] - 1
    noise = mvn_sample(np.zeros(model.obs_dim), r_true, rng, n_cycles)
    return np.asarray(model.observe(states[1:]), dtype=float) + noise


def simulate_truth_and_obs(model, q_true, r_true, x0, n_cycles, rng):
    """Generate a twin-experiment truth trajectory and its noisy observations.

    Uses two child streams of `rng` (index 0 for model noise, 1 for
    observation noise) so that regenerating observations for a fixed truth
    is possible by reusing stream 0's output.

    Returns
    -------
    states : ndarray, shape (n_cycles + 1, state_dim)
    observations : ndarray, shape (n_cycles, obs_dim)
    """
    states = simulate_states(model, q_true, x0, n_cycles, rng.child(0))
    obs = observe_states(model, states, r_true, rng.child(1))
    return states, obs


def write_truth_obs_csv(path, states, observations):
    """Write a truth/observation dump.

    Columns are ``k, x_1..x_Nx, y_1..y_M``; the ``k = 0`` row carries the
    initial state with empty observation fields. Floats are printed with 17
    significant digits so the file round-trips binary64 exactly.
    """
    states = np.asarray(states, dtype=float)
    observations = np.asarray(observations, dtype=float)
    n_x = states.shape[1]
    n_y = observations.shape[1]
    header = ["k"] + [f"x_{i+1}" for i in range(n_x)] + [f"y_{i+1}" for i in range(n_y)]
    lines = [",".join(header)]
    lines.append(",".join(["0"] + [_fmt(v) for v in states[0]] + [""] * n_y))
    for k in range(1, states.shape[0]):
        row = [str(k)] + [_fmt(v) for v in states[k]] + [_fmt(v) for v in observations[k - 1]]
        lines.append(",".join(row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_truth_obs_csv(path):
    """Read a dump written by :func:`write_truth_obs_csv`.

    Returns
    -------
    states : ndarray, shape (n_cycles + 1, n_x)
    observations : ndarray, shape (n_cycles, n_y)
    """
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
        n_x = sum(1 for c in header if c.startswith("x_"))
        n_y = sum(1 for c in header if c.startswith("y_"))
        states = []
        obs = []
        for line in fh:
            cells = line.strip().split(",")
            if len(cells) != 1 + n_x + n_y:
                raise ValueError(f"malformed row in {path}: {line!r}")
            states.append([float(c) for c in cells[1 : 1 + n_x]])
            y_cells = cells[1 + n_x :]
            if any(c != "" for c in y_cells):
                obs.append([float(c) for c in y_cells])
    return np.asarray(states), np.asarray(obs)


def _fmt(value):
    return format(float(value), ".17g")
