"""Shared test oracles.

Two independent references for the sampler checks:

* central finite differences for gradients;
* the exact stationary covariance of any A/B/O composition on a quadratic
  potential, via the discrete Lyapunov equation (one step is affine in
  (theta, p), so the stationary second moments solve S = A S A^T + Q).
  The letter programs are written out here by hand, independently of the
  sampler module's tables.
"""

import numpy as np
import pytest
from scipy.linalg import solve_discrete_lyapunov

from nnsampling import Architecture, loss_and_gradient


def finite_difference_gradient(arch: Architecture, params, inputs, labels,
                               step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(params)
    for i in range(len(params)):
        up = params.copy()
        down = params.copy()
        up[i] += step
        down[i] -= step
        loss_up = loss_and_gradient(arch, up, inputs, labels).loss
        loss_down = loss_and_gradient(arch, down, inputs, labels).loss
        grad[i] = (loss_up - loss_down) / (2 * step)
    return grad


# Independent scheme definitions (letter, stepsize fraction).
ORACLE_PROGRAMS = {
    "BAOAB": (("B", 0.5), ("A", 0.5), ("O", 1.0), ("A", 0.5), ("B", 0.5)),
    "ABOBA": (("A", 0.5), ("B", 0.5), ("O", 1.0), ("B", 0.5), ("A", 0.5)),
    "OBABO": (("O", 0.5), ("B", 0.5), ("A", 1.0), ("B", 0.5), ("O", 0.5)),
    "GLA1": (("O", 1.0), ("A", 1.0), ("B", 1.0)),
    "GLA2": (("B", 0.5), ("A", 1.0), ("B", 0.5), ("O", 1.0)),
    "ABO": (("A", 1.0), ("B", 1.0), ("O", 1.0)),
    "BAO": (("B", 1.0), ("A", 1.0), ("O", 1.0)),
    "OAB": (("O", 1.0), ("A", 1.0), ("B", 1.0)),
}


def quadratic_stationary_moments(scheme: str, eps: float, gamma: float,
                                 beta: float, omega2: float):
    """Exact stationary (<theta^2>, <p^2>) of the scheme on a mode with
    force -omega2 * theta (for L = a theta^2, omega2 = 2a)."""
    a_mat = np.eye(2)
    q_mat = np.zeros((2, 2))
    for letter, frac in ORACLE_PROGRAMS[scheme]:
        h = eps * frac
        if letter == "A":
            m = np.array([[1.0, h], [0.0, 1.0]])
        elif letter == "B":
            m = np.array([[1.0, 0.0], [-h * omega2, 1.0]])
        else:
            alpha = np.exp(-gamma * h)
            m = np.array([[1.0, 0.0], [0.0, alpha]])
            b = np.array([0.0, np.sqrt((1.0 - alpha**2) / beta)])
            a_mat = m @ a_mat
            q_mat = m @ q_mat @ m.T + np.outer(b, b)
            continue
        a_mat = m @ a_mat
        q_mat = m @ q_mat @ m.T
    s = solve_discrete_lyapunov(a_mat, q_mat)
    return float(s[0, 0]), float(s[1, 1])


def ar1_series(rho: float, n: int, seed: int) -> np.ndarray:
    """Stationary AR(1) with unit marginal variance."""
    from scipy.signal import lfilter
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n)
    x0 = rng.standard_normal()
    out = lfilter([np.sqrt(1 - rho**2)], [1.0, -rho], noise,
                  zi=np.array([rho * x0]))[0]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
