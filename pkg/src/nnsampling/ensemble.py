"""Ensemble quasi-Newton sampling: L walkers, each preconditioned by the
Cholesky factor of (I + eta * Cov(other walkers' positions)).

The underlying per-walker dynamics is

    d theta = B p dt
    d p     = -B^T grad L(theta) dt + div(B^T) dt - gamma p dt
              + sqrt(2 gamma / beta) dW.

Between rebuilds the factors are frozen and walker i's factor never
depends on walker i's own position, so the divergence term is identically
zero and the O-update omits it.

One step is the BAOAB discretization of that system (B = B_i frozen):

    p_half  = p - (eps/2) B^T grad L(theta)
    t_half  = theta + (eps/2) B p_half
    p_hat   = alpha p_half + sqrt((1 - alpha^2)/beta) R
    theta'  = t_half + (eps/2) B p_hat
    p'      = p_hat - (eps/2) B^T grad L(theta')

The transposed kick matters: in the transformed variable u = B^{-1} theta
this is plain BAOAB for the symmetric curvature B^T (grad^2 L) B, so
quadratic targets keep their exact position marginals and the stability
threshold is eps^2 * max eig((grad^2 L) B B^T) < 4.  kick_mode="asymmetric"
instead applies the untransposed factor on the first kick and no factor on
the final one; with a triangular Cholesky factor that composition is not a
Hamiltonian splitting in any variable, breaks fluctuation-dissipation, and
inflates (for strong blending, explosively) the variance along wide target
directions.  It is kept only for side-by-side comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .samplers import DivergenceError, SamplerConfig

KICK_MODES = ("adjoint", "asymmetric")


@dataclass
class EnsembleState:
    """Stacked walker ensemble; row i of each array belongs to walker i."""

    thetas: np.ndarray            # (L, N)
    momenta: np.ndarray           # (L, N)
    rngs: list                    # one Generator per walker (disjoint streams)
    covariance_blending: float = 0.0
    rebuild_period: int = 1000
    preconditioners: np.ndarray | None = None   # (L, N, N) lower Cholesky, None = identity
    cached_losses: np.ndarray | None = None
    cached_grads: np.ndarray | None = None
    grad_is_current: bool = False
    step_count: int = 0
    aux: dict = field(default_factory=dict)

    @property
    def n_walkers(self) -> int:
        return self.thetas.shape[0]

    @property
    def n_parameters(self) -> int:
        return self.thetas.shape[1]


def make_ensemble(theta0: np.ndarray, n_walkers: int, seed,
                  covariance_blending: float = 0.0, rebuild_period: int = 1000,
                  beta: float | None = None, initial_spread: float = 0.0,
                  freeze_mask: np.ndarray | None = None) -> EnsembleState:
    """Ensemble of walkers at theta0 with per-walker RNG streams spawned
    from one master seed.  initial_spread > 0 adds Gaussian jitter so the
    first covariance rebuild sees non-degenerate positions."""
    if n_walkers < 1:
        raise ValueError("need at least one walker")
    if covariance_blending < 0:
        raise ValueError("covariance blending must be >= 0")
    if rebuild_period < 1:
        raise ValueError("rebuild period must be >= 1")
    theta0 = np.asarray(theta0, dtype=np.float64)
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(child) for child in seq.spawn(n_walkers)]
    active = None if freeze_mask is None else (~np.asarray(freeze_mask, dtype=bool))
    thetas = np.tile(theta0, (n_walkers, 1))
    momenta = np.zeros_like(thetas)
    for i, rng in enumerate(rngs):
        if initial_spread > 0.0:
            jitter = initial_spread * rng.standard_normal(theta0.shape)
            thetas[i] += jitter if active is None else jitter * active
        if beta is not None:
            p = rng.standard_normal(theta0.shape) / np.sqrt(beta)
            momenta[i] = p if active is None else p * active
    return EnsembleState(thetas=thetas, momenta=momenta, rngs=rngs,
                         covariance_blending=covariance_blending,
                         rebuild_period=rebuild_period)


def rebuild_preconditioners(state: EnsembleState) -> EnsembleState:
    """Refresh every walker's Cholesky factor from the sample covariance of
    the OTHER walkers' positions (denominator = number of other walkers;
    any constant rescale is absorbed by the blending constant)."""
    n_w, n_p = state.thetas.shape
    eta = state.covariance_blending
    if eta == 0.0 or n_w < 2:
        state.preconditioners = None
        return state
    factors = np.empty((n_w, n_p, n_p))
    eye = np.eye(n_p)
    for i in range(n_w):
        others = np.delete(state.thetas, i, axis=0)
        centered = others - others.mean(axis=0)
        cov = centered.T @ centered / others.shape[0]
        blended = eye + eta * cov
        try:
            factors[i] = np.linalg.cholesky(blended)
        except np.linalg.LinAlgError:
            try:
                factors[i] = np.linalg.cholesky(blended + 1e-12 * eye)
            except np.linalg.LinAlgError as exc:
                raise RuntimeError(
                    f"Cholesky factorization failed for walker {i} even after "
                    f"jitter; eta={eta}") from exc
    state.preconditioners = factors
    return state


def preconditioner_spectra(state: EnsembleState) -> np.ndarray:
    """Eigenvalues of B_i B_i^T per walker, shape (L, N), ascending."""
    if state.preconditioners is None:
        return np.ones((state.n_walkers, state.n_parameters))
    bbt = np.einsum("lij,lkj->lik", state.preconditioners, state.preconditioners)
    return np.linalg.eigvalsh(bbt)


def _ensure_gradients(state: EnsembleState, config: SamplerConfig, grad_fn) -> np.ndarray:
    amax = np.max(np.abs(state.thetas))
    if not np.isfinite(amax) or amax > config.stability_threshold:
        raise DivergenceError(
            f"stability threshold exceeded: |theta|_inf = {amax:.3e} "
            f"at ensemble step {state.step_count}")
    if not state.grad_is_current:
        losses, grads = grad_fn(state.thetas)
        active = config.active
        if active is not None:
            grads = grads * active
        if not np.all(np.isfinite(grads)):
            raise DivergenceError(f"non-finite gradient at ensemble step {state.step_count}")
        state.cached_losses = losses
        state.cached_grads = grads
        state.grad_is_current = True
    return state.cached_grads


def _apply(precond: np.ndarray | None, vectors: np.ndarray) -> np.ndarray:
    if precond is None:
        return vectors
    return np.einsum("lij,lj->li", precond, vectors)


def _apply_transposed(precond: np.ndarray | None, vectors: np.ndarray) -> np.ndarray:
    if precond is None:
        return vectors
    return np.einsum("lji,lj->li", precond, vectors)


def _ensemble_noise(state: EnsembleState, config: SamplerConfig) -> np.ndarray:
    noise = np.empty_like(state.momenta)
    for i, rng in enumerate(state.rngs):
        noise[i] = rng.standard_normal(state.n_parameters)
    active = config.active
    return noise if active is None else noise * active


def step_eqn(state: EnsembleState, config: SamplerConfig, grad_fn,
             kick_mode: str = "adjoint") -> EnsembleState:
    """Advance every walker one preconditioned-BAOAB step (frozen factors).

    kick_mode "adjoint" (default) applies B^T to both momentum kicks, the
    stable discretization of the walker dynamics; "asymmetric" applies B to
    the first kick and nothing to the final one (comparison only, see the
    module docstring).
    """
    if kick_mode not in KICK_MODES:
        raise ValueError(f"kick_mode must be one of {KICK_MODES}, got {kick_mode!r}")
    adjoint = kick_mode == "adjoint"
    eps = config.step_size
    half = 0.5 * eps
    beta = config.inverse_temperature
    alpha = math.exp(-config.friction * eps)
    b = state.preconditioners

    grads = _ensure_gradients(state, config, grad_fn)
    kick = _apply_transposed(b, grads) if adjoint else _apply(b, grads)
    p = state.momenta - half * kick
    theta = state.thetas + half * _apply(b, p)
    p = alpha * p
    if not config.zero_noise:
        scale = math.sqrt((1.0 - alpha * alpha) / beta)
        if scale > 0.0:
            p = p + scale * _ensemble_noise(state, config)
    state.thetas = theta + half * _apply(b, p)
    state.grad_is_current = False
    grads = _ensure_gradients(state, config, grad_fn)
    state.momenta = p - half * (_apply_transposed(b, grads) if adjoint else grads)
    state.step_count += 1
    return state


def run_eqn(state: EnsembleState, config: SamplerConfig, grad_fn, n_steps: int,
            record=None, kick_mode: str = "adjoint") -> EnsembleState:
    """Step the ensemble n_steps times, rebuilding preconditioners every
    rebuild_period steps (also at entry).  record(state) is called after
    every step when given."""
    for _ in range(n_steps):
        if state.step_count % state.rebuild_period == 0:
            rebuild_preconditioners(state)
        step_eqn(state, config, grad_fn, kick_mode=kick_mode)
        if record is not None:
            record(state)
    return state
