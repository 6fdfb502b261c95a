"""Optimizers and single-walker samplers as step functions on WalkerState.

Langevin splitting schemes compose three exactly solvable sub-updates with
stepsize h (mass matrix fixed to the identity):

    A_h: theta <- theta + h p
    B_h: p     <- p - h grad L(theta)
    O_h: p     <- alpha p + sqrt((1 - alpha^2)/beta) R,   alpha = exp(-gamma h)

A scheme is named by its letter order; three-letter sequences use h = eps
per letter, five-letter palindromes use eps/2 on the outer letters and eps
in the middle.  GLA1 is the first-order "OAB" composition, GLA2 the
Strang-split B_{eps/2} A_eps B_{eps/2} O_eps.

Gradients are cached on the walker: a B step reuses the stored gradient
when theta has not moved since it was computed, so BAOAB and GLA2 cost
exactly one fresh gradient evaluation per step.

State arrays may carry a leading batch axis (n_replicas, N) to advance
independent replicas in lockstep; every update broadcasts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Stability threshold exceeded or non-finite state encountered."""


@dataclass
class SamplerConfig:
    """Stepsize and thermostat parameters shared by all step functions.

    freeze_mask is a boolean vector (True = parameter held fixed): frozen
    coordinates get zero gradient, zero noise and zero momentum, so they
    never move and do not count toward kinetic energy.
    """

    step_size: float
    friction: float = 1.0
    inverse_temperature: float = 1.0
    hmc_inner_steps: int = 10
    hmc_randomize_steps: bool = False
    zero_noise: bool = False
    freeze_mask: np.ndarray | None = None
    stability_threshold: float = 1e8
    bb_initial_step: float = 0.05
    bb_step_bounds: tuple[float, float] = (1e-6, 10.0)

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if self.friction < 0:
            raise ValueError(f"friction must be >= 0, got {self.friction}")
        if not self.inverse_temperature > 0:
            raise ValueError(
                f"inverse temperature must be positive, got {self.inverse_temperature}")
        if self.hmc_inner_steps < 1:
            raise ValueError("hmc_inner_steps must be >= 1")
        if self.freeze_mask is not None:
            self.freeze_mask = np.asarray(self.freeze_mask, dtype=bool)
            self._active = (~self.freeze_mask).astype(np.float64)
        else:
            self._active = None

    @property
    def active(self) -> np.ndarray | None:
        """Multiplicative mask (1 active, 0 frozen) or None."""
        return self._active


@dataclass
class WalkerState:
    """Position, momentum, cached gradient and a private RNG stream."""

    theta: np.ndarray
    momentum: np.ndarray
    rng: np.random.Generator
    cached_loss: np.ndarray | float | None = None
    cached_grad: np.ndarray | None = None
    grad_is_current: bool = False
    step_count: int = 0
    aux: dict = field(default_factory=dict)


def make_walker(theta0: np.ndarray, seed, beta: float | None = None,
                freeze_mask: np.ndarray | None = None) -> WalkerState:
    """Walker at theta0 with momentum drawn from N(0, 1/beta) (zeros when
    beta is None).  seed may be an int or a SeedSequence."""
    theta = np.array(theta0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if beta is None:
        momentum = np.zeros_like(theta)
    else:
        momentum = rng.standard_normal(theta.shape) / np.sqrt(beta)
    if freeze_mask is not None:
        momentum = momentum * (~np.asarray(freeze_mask, dtype=bool))
    return WalkerState(theta=theta, momentum=momentum, rng=rng)


def ensure_gradient(state: WalkerState, config: SamplerConfig, grad_fn) -> np.ndarray:
    """Refresh the cached gradient if theta moved since it was computed.

    Every sampler computes at least one fresh gradient per step, so this
    is also the stability chokepoint: theta and the gradient are checked
    on each refresh.
    """
    if not state.grad_is_current:
        amax = np.max(np.abs(state.theta))
        if not amax <= config.stability_threshold:   # catches NaN too
            raise DivergenceError(
                f"stability threshold exceeded: |theta|_inf = {amax:.3e} "
                f"(threshold {config.stability_threshold:.1e}) at step {state.step_count}")
        loss, grad = grad_fn(state.theta)
        active = config.active
        if active is not None:
            grad = grad * active
        if not np.isfinite(np.sum(grad)):
            raise DivergenceError(
                f"non-finite gradient at step {state.step_count} "
                f"(|theta| = {np.linalg.norm(state.theta):.3e})")
        state.cached_loss = loss
        state.cached_grad = grad
        state.grad_is_current = True
    return state.cached_grad


def _noise(state, config):
    r = state.rng.standard_normal(state.theta.shape)
    active = config.active
    return r if active is None else r * active


def step_gd(state: WalkerState, config: SamplerConfig, grad_fn) -> WalkerState:
    """Plain gradient descent: theta <- theta - eps * grad. Momentum untouched."""
    grad = ensure_gradient(state, config, grad_fn)
    state.theta = state.theta - config.step_size * grad
    state.grad_is_current = False
    state.step_count += 1
    return state


def step_sgd(state: WalkerState, config: SamplerConfig, grad_fn) -> WalkerState:
    """SGD is the GD update driven by a minibatch gradient closure
    (data.minibatch_gradient applies the M/m rescale)."""
    return step_gd(state, config, grad_fn)


def step_bbgd(state: WalkerState, config: SamplerConfig, grad_fn) -> WalkerState:
    """Gradient descent with the BB2 Barzilai-Borwein stepsize
    eps_k = (dtheta . dgrad) / (dgrad . dgrad), clamped to bb_step_bounds.
    The first step uses bb_initial_step; a vanishing denominator falls
    back to the previous stepsize."""
    grad = ensure_gradient(state, config, grad_fn)
    prev = state.aux.get("bb_prev")
    lo, hi = config.bb_step_bounds
    if prev is None:
        eps = np.asarray(config.bb_initial_step, dtype=np.float64)
    else:
        prev_theta, prev_grad, prev_eps = prev
        d_theta = state.theta - prev_theta
        d_grad = grad - prev_grad
        denom = np.sum(d_grad * d_grad, axis=-1, keepdims=state.theta.ndim > 1)
        numer = np.sum(d_theta * d_grad, axis=-1, keepdims=state.theta.ndim > 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            eps = np.where(denom > 0.0, np.clip(numer / np.where(denom > 0, denom, 1.0), lo, hi),
                           prev_eps)
    state.aux["bb_prev"] = (state.theta.copy(), grad.copy(), eps)
    state.theta = state.theta - eps * grad
    state.grad_is_current = False
    state.step_count += 1
    return state


def step_sgld(state: WalkerState, config: SamplerConfig, grad_fn) -> WalkerState:
    """Overdamped update theta <- theta - eps grad + sqrt(2 eps / beta) R.
    Momentum is unused.  grad_fn may be a minibatch closure."""
    eps = config.step_size
    grad = ensure_gradient(state, config, grad_fn)
    theta = state.theta
    theta -= eps * grad
    if not config.zero_noise:
        theta += math.sqrt(2.0 * eps / config.inverse_temperature) * _noise(state, config)
    state.grad_is_current = False
    state.step_count += 1
    return state


_THREE_LETTER = ("ABO", "AOB", "BAO", "BOA", "OAB", "OBA")
_PALINDROMES = ("BAOAB", "ABOBA", "OBABO")


def _compile_sequence(sequence: str) -> tuple[tuple[str, float], ...]:
    name = sequence.upper()
    if name == "GLA1":
        name = "OAB"
    if name == "GLA2":
        return (("B", 0.5), ("A", 1.0), ("B", 0.5), ("O", 1.0))
    if name in _THREE_LETTER:
        return tuple((letter, 1.0) for letter in name)
    if name in _PALINDROMES:
        a, b, c = name[0], name[1], name[2]
        return ((a, 0.5), (b, 0.5), (c, 1.0), (b, 0.5), (a, 0.5))
    raise ValueError(
        f"unknown splitting sequence {sequence!r}; expected one of "
        f"{_THREE_LETTER + _PALINDROMES + ('GLA1', 'GLA2')}")


_PROGRAM_CACHE: dict[str, tuple[tuple[str, float], ...]] = {}


def splitting_program(sequence: str) -> tuple[tuple[str, float], ...]:
    prog = _PROGRAM_CACHE.get(sequence)
    if prog is None:
        prog = _compile_sequence(sequence)
        _PROGRAM_CACHE[sequence] = prog
    return prog


def step_splitting(state: WalkerState, config: SamplerConfig, grad_fn,
                   sequence: str) -> WalkerState:
    """One full step of the named A/B/O composition."""
    eps = config.step_size
    gamma = config.friction
    beta = config.inverse_temperature
    for letter, frac in splitting_program(sequence):
        h = eps * frac
        if letter == "A":
            state.theta += h * state.momentum
            state.grad_is_current = False
        elif letter == "B":
            state.momentum -= h * ensure_gradient(state, config, grad_fn)
        else:  # O
            alpha = math.exp(-gamma * h)
            state.momentum *= alpha
            if not config.zero_noise:
                scale = math.sqrt((1.0 - alpha * alpha) / beta)
                if scale > 0.0:
                    state.momentum += scale * _noise(state, config)
    state.step_count += 1
    return state


def step_hmc(state: WalkerState, config: SamplerConfig, grad_fn,
             loss_fn=None) -> tuple[WalkerState, np.ndarray]:
    """One hybrid Monte Carlo step: resample momenta from N(0, 1/beta),
    integrate K Verlet steps (B_{eps/2} A_eps B_{eps/2}), accept with
    probability min(1, exp(-beta dH)) where H = L(theta) + p.p/2.

    grad_fn must evaluate the FULL loss and gradient; the loss it returns
    is used for H (a separate loss_fn may override it).  On rejection
    theta is reset to the starting point.  Returns (state, accepted):
    accepted is a bool, or a boolean vector for batched replicas.
    """
    eps = config.step_size
    beta = config.inverse_temperature
    k_steps = config.hmc_inner_steps
    if config.hmc_randomize_steps and k_steps > 1:
        k_steps = int(state.rng.integers(1, config.hmc_inner_steps + 1))

    state.momentum = _noise(state, config) / np.sqrt(beta)

    theta0 = state.theta.copy()
    ensure_gradient(state, config, grad_fn)
    grad0, loss0 = state.cached_grad.copy(), state.cached_loss
    if loss_fn is not None:
        loss0 = loss_fn(theta0)
    h0 = loss0 + 0.5 * np.sum(state.momentum * state.momentum, axis=-1)

    for _ in range(k_steps):
        grad = ensure_gradient(state, config, grad_fn)
        state.momentum = state.momentum - 0.5 * eps * grad
        state.theta = state.theta + eps * state.momentum
        state.grad_is_current = False
        grad = ensure_gradient(state, config, grad_fn)
        state.momentum = state.momentum - 0.5 * eps * grad

    loss1 = state.cached_loss if loss_fn is None else loss_fn(state.theta)
    h1 = loss1 + 0.5 * np.sum(state.momentum * state.momentum, axis=-1)

    # min(1, exp(-beta dH)); non-finite dH counts as a rejection
    delta_h = h1 - h0
    with np.errstate(invalid="ignore"):
        ratio = np.where(np.isfinite(delta_h),
                         np.exp(-beta * np.clip(delta_h, 0.0, 700.0 / beta)), 0.0)
    u = state.rng.uniform(size=np.shape(delta_h))
    accepted = u < ratio

    if state.theta.ndim > 1:
        keep = accepted[:, None]
        state.theta = np.where(keep, state.theta, theta0)
        state.cached_grad = np.where(keep, state.cached_grad, grad0)
        state.cached_loss = np.where(accepted, state.cached_loss, loss0)
        state.grad_is_current = True
    elif not accepted:
        state.theta = theta0
        state.cached_grad = grad0
        state.cached_loss = loss0
        state.grad_is_current = True
    state.step_count += 1
    return state, accepted
