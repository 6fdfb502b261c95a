"""Trajectory observables and diagnostics: kinetic energy, virial, running
averages, integrated autocorrelation times, covariance spectra and
loss-landscape grids."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import Architecture, total_loss


class AnalysisError(RuntimeError):
    """Diagnostic could not be computed (degenerate or too-short input)."""


def kinetic_energy(momentum: np.ndarray) -> float | np.ndarray:
    """0.5 |p|^2 (unit mass).  Canonical trajectory average is N/(2 beta)."""
    momentum = np.asarray(momentum, dtype=np.float64)
    return 0.5 * np.sum(momentum * momentum, axis=-1)


def virial(theta: np.ndarray, grad: np.ndarray) -> float | np.ndarray:
    """theta . grad L(theta).  For confining potentials its canonical
    average is twice the kinetic-energy average, N/beta."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    return np.sum(theta * grad, axis=-1)


def running_average(values) -> np.ndarray:
    """Prefix means (1/(k+1)) sum_{j<=k} v_j."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise AnalysisError("running average of an empty sequence")
    return np.cumsum(values) / np.arange(1, values.size + 1)


@dataclass
class Trajectory:
    """Thinned time series of scalar observables, optionally with theta
    snapshots.  Step indices advance by thin_interval."""

    walker_id: int = 0
    thin_interval: int = 1
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    kinetic_energies: list = field(default_factory=list)
    virials: list = field(default_factory=list)
    thetas: list = field(default_factory=list)

    def record(self, step, loss, kinetic, vir, theta=None):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("trajectory steps must be strictly increasing")
        if kinetic < 0:
            raise ValueError("kinetic energy must be nonnegative")
        self.steps.append(int(step))
        self.losses.append(float(loss))
        self.kinetic_energies.append(float(kinetic))
        self.virials.append(float(vir))
        if theta is not None:
            self.thetas.append(np.array(theta, dtype=np.float64))

    @property
    def n_records(self) -> int:
        return len(self.steps)

    def theta_matrix(self) -> np.ndarray:
        if not self.thetas:
            raise AnalysisError("trajectory carries no theta snapshots")
        return np.asarray(self.thetas)

    def observable(self, name: str) -> np.ndarray:
        arrays = {"loss": self.losses, "kinetic_energy": self.kinetic_energies,
                  "virial": self.virials}
        if name not in arrays:
            raise KeyError(f"unknown observable {name!r}; have {sorted(arrays)}")
        return np.asarray(arrays[name], dtype=np.float64)

    def to_csv(self, path, include_theta: bool = False) -> None:
        """Columns: step, walker, loss, kinetic_energy, virial[, theta_*]."""
        n_theta = len(self.thetas[0]) if (include_theta and self.thetas) else 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "walker", "loss", "kinetic_energy", "virial"]
                            + [f"theta_{i}" for i in range(n_theta)])
            for k in range(self.n_records):
                row = [self.steps[k], self.walker_id, repr(self.losses[k]),
                       repr(self.kinetic_energies[k]), repr(self.virials[k])]
                if n_theta:
                    row += [repr(float(v)) for v in self.thetas[k]]
                writer.writerow(row)


def trajectory_from_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        idx = {name: i for i, name in enumerate(header)}
        theta_cols = [i for i, name in enumerate(header) if name.startswith("theta_")]
        traj = Trajectory()
        rows = list(reader)
    if len(rows) >= 2:
        traj.thin_interval = int(rows[1][idx["step"]]) - int(rows[0][idx["step"]])
    for row in rows:
        traj.walker_id = int(row[idx["walker"]])
        traj.record(int(row[idx["step"]]), float(row[idx["loss"]]),
                    float(row[idx["kinetic_energy"]]), float(row[idx["virial"]]),
                    theta=[float(row[i]) for i in theta_cols] if theta_cols else None)
    return traj


@dataclass
class IatResult:
    tau: float
    mean: float
    sigma: float   # standard error of the series mean


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = len(x)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n]
    return acov / n


def integrated_autocorrelation_time(series, window_factor: float = 5.0,
                                    max_recursion: int = 3) -> IatResult:
    """Self-consistent-window IAT estimate.

    tau(W) = 1 + 2 sum_{k<=W} C(k)/C(0); the reported tau uses the smallest
    window with W >= window_factor * tau(W).  If no window is
    self-consistent the series is pairwise averaged (halved) and tau
    rescaled by 2, up to max_recursion times.  tau is in units of the
    series' sampling interval; rescale by the thin interval for thinned
    trajectories.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    n = x.size
    if n < 64:
        raise AnalysisError(f"series too short for IAT estimation ({n} < 64)")
    mean = float(x.mean())
    xc = x - mean
    acov = _autocovariance(xc)
    c0 = acov[0]
    if c0 <= 0.0:
        raise AnalysisError("zero-variance series: IAT undefined")
    # lags beyond n/2 carry no information in the biased estimator
    max_window = n // 2
    taus = 1.0 + 2.0 * np.cumsum(acov[1:max_window + 1] / c0)
    windows = np.arange(1, max_window + 1, dtype=np.float64)
    consistent = (windows >= window_factor * taus) & (taus > 0.0)
    if consistent.any():
        tau = float(taus[np.argmax(consistent)])
    else:
        if max_recursion <= 0:
            raise AnalysisError(
                "IAT not converged: no self-consistent window and recursion "
                "budget exhausted")
        half = x[: 2 * (n // 2)].reshape(-1, 2).mean(axis=1)
        tau = 2.0 * integrated_autocorrelation_time(
            half, window_factor, max_recursion - 1).tau
    sigma = float(np.sqrt(max(tau, 0.0) * c0 / n))
    return IatResult(tau=tau, mean=mean, sigma=sigma)


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray    # descending
    eigenvectors: np.ndarray   # column j pairs with eigenvalues[j]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "eigenvalue"])
            for i, v in enumerate(self.eigenvalues):
                writer.writerow([i, repr(float(v))])

    def save_eigenvectors(self, path) -> None:
        n, k = self.eigenvectors.shape
        np.savetxt(path, self.eigenvectors, header=f"{n} {k}")


def _power_iteration_spectrum(snapshots: np.ndarray, top_k: int,
                              tol: float = 1e-13, max_iter: int = 100_000,
                              seed: int = 0) -> SpectrumResult:
    """Top-k eigenpairs of the sample covariance by power iteration with
    deflation, using matvecs through the centered snapshot matrix (the
    dense covariance is never formed)."""
    n, dim = snapshots.shape
    centered = snapshots - snapshots.mean(axis=0)
    denom = n - 1

    def matvec(v):
        return centered.T @ (centered @ v) / denom

    rng = np.random.default_rng(seed)
    values = np.zeros(top_k)
    vectors = np.zeros((dim, top_k))
    for j in range(top_k):
        v = rng.standard_normal(dim)
        if j:
            v -= vectors[:, :j] @ (vectors[:, :j].T @ v)
        norm = np.linalg.norm(v)
        v /= norm
        lam = 0.0
        for _ in range(max_iter):
            w = matvec(v)
            if j:
                w -= vectors[:, :j] @ (vectors[:, :j].T @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                lam = 0.0
                break
            w /= norm
            new_lam = float(w @ matvec(w))
            if abs(new_lam - lam) <= tol * max(abs(new_lam), 1e-300):
                v = w
                lam = new_lam
                break
            v, lam = w, new_lam
        values[j] = lam
        vectors[:, j] = v
    order = np.argsort(values)[::-1]
    return SpectrumResult(values[order], vectors[:, order])


def covariance_spectrum(snapshots: np.ndarray, top_k: int | None = None,
                        method: str = "auto", dense_limit: int = 4000,
                        seed: int = 0) -> SpectrumResult:
    """Eigendecomposition of the sample covariance (denominator n-1) of the
    snapshot rows.  Dense for dimension <= dense_limit, otherwise top-k
    power iteration with deflation."""
    snapshots = np.atleast_2d(np.asarray(snapshots, dtype=np.float64))
    n, dim = snapshots.shape
    if n < 2:
        raise AnalysisError("need at least two snapshots for a covariance")
    if method == "auto":
        method = "dense" if dim <= dense_limit else "power"
    if method == "dense":
        centered = snapshots - snapshots.mean(axis=0)
        cov = centered.T @ centered / (n - 1)
        values, vectors = np.linalg.eigh(cov)
        order = np.argsort(values)[::-1]
        values, vectors = values[order], vectors[:, order]
        if top_k is not None:
            values, vectors = values[:top_k], vectors[:, :top_k]
        return SpectrumResult(values, vectors)
    if method == "power":
        k = min(top_k if top_k is not None else 20, dim)
        return _power_iteration_spectrum(snapshots, k, seed=seed)
    raise ValueError(f"unknown method {method!r}")


def trajectory_covariance(trajectories, mode: str = "pooled",
                          top_k: int | None = None, method: str = "auto",
                          dense_limit: int = 4000):
    """Covariance spectrum of stored theta snapshots.

    mode="pooled" concatenates all walkers and returns one SpectrumResult;
    mode="per_walker" returns a list with one result per trajectory.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    mats = [t.theta_matrix() for t in trajectories]
    if mode == "pooled":
        return covariance_spectrum(np.vstack(mats), top_k=top_k, method=method,
                                   dense_limit=dense_limit)
    if mode == "per_walker":
        return [covariance_spectrum(m, top_k=top_k, method=method,
                                    dense_limit=dense_limit) for m in mats]
    raise ValueError(f"unknown mode {mode!r}")


LOG_SHIFT_FLOOR = 1e-16


@dataclass
class LandscapeGrid:
    """Loss on an equidistant 2-d grid in the (v0, v1) parameter plane."""

    c0: np.ndarray              # (S,) offsets along v0 (grid rows)
    c1: np.ndarray              # (S,) offsets along v1 (grid columns)
    losses: np.ndarray          # (S, S), losses[i, j] at c0[i], c1[j]
    log_shifted: np.ndarray     # ln|loss - reference|, floored
    reference_loss: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["c0", "c1", "loss", "log_shifted_loss"])
            for i, a in enumerate(self.c0):
                for j, b in enumerate(self.c1):
                    writer.writerow([repr(float(a)), repr(float(b)),
                                     repr(float(self.losses[i, j])),
                                     repr(float(self.log_shifted[i, j]))])


def _checked_direction(v, name):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError(f"direction {name} is the zero vector")
    if abs(norm - 1.0) > 1e-8:
        warnings.warn(f"direction {name} has norm {norm:.6g}; normalizing")
        v = v / norm
    return v


def landscape_grid(arch: Architecture, params_center: np.ndarray,
                   v0: np.ndarray, v1: np.ndarray, half_width: float,
                   samples_per_axis: int, dataset,
                   extra_losses=None) -> LandscapeGrid:
    """Full-dataset loss on the grid center + c0*v0 + c1*v1 with c values
    equidistant on [-half_width, half_width] (endpoints included).  The
    log-shifted surface is ln|L - L0| with L0 the minimum over the grid and
    any extra_losses (e.g. re-evaluated trajectory points)."""
    v0 = _checked_direction(v0, "v0")
    v1 = _checked_direction(v1, "v1")
    center = np.asarray(params_center, dtype=np.float64)
    c = np.linspace(-half_width, half_width, samples_per_axis)
    losses = np.empty((samples_per_axis, samples_per_axis))
    for i, a in enumerate(c):
        base = center + a * v0
        for j, b in enumerate(c):
            losses[i, j] = total_loss(arch, base + b * v1,
                                      dataset.inputs, dataset.labels)
    reference = float(losses.min())
    if extra_losses is not None and len(extra_losses):
        reference = min(reference, float(np.min(extra_losses)))
    log_shifted = np.log(np.maximum(np.abs(losses - reference), LOG_SHIFT_FLOOR))
    return LandscapeGrid(c0=c.copy(), c1=c.copy(), losses=losses,
                         log_shifted=log_shifted, reference_loss=reference)


def project_trajectory(thetas, center, v0, v1, arch: Architecture,
                       dataset) -> np.ndarray:
    """Rows (c0, c1, loss): coordinates of each snapshot in the (v0, v1)
    plane plus its full-dataset loss re-evaluated at the TRUE theta (the
    projected point does not lie on the grid surface)."""
    if isinstance(thetas, Trajectory):
        thetas = thetas.theta_matrix()
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    v0 = _checked_direction(v0, "v0")
    v1 = _checked_direction(v1, "v1")
    center = np.asarray(center, dtype=np.float64)
    out = np.empty((thetas.shape[0], 3))
    for k, theta in enumerate(thetas):
        d = theta - center
        out[k, 0] = d @ v0
        out[k, 1] = d @ v1
        out[k, 2] = total_loss(arch, theta, dataset.inputs, dataset.labels)
    return out
