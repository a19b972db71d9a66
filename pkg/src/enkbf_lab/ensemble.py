"""Interacting particle systems: the finite-N filter, its exact mean-field
family, and coupled independent copies for propagation-of-chaos runs.

A particle update (default variant) is
    X^i <- X^i + A X^i dt + sigma_B dB^i + K (dZ - H (X^i + m) dt / 2)
with the empirical gain K = S H^T.  The (gamma1, gamma2) family trades the
per-particle process noise against a deterministic spread term and an
observation perturbation; all members share the same mean and covariance
dynamics, so they are interchangeable in law.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Union

import numpy as np

from .linmodel import ModelParams, NoiseBundle, TimeGrid, psd_sqrt, symmetrize

__all__ = [
    "VariantParams",
    "STOCHASTIC_FPF",
    "DETERMINISTIC_FPF",
    "PERTURBED_OBSERVATION",
    "Ensemble",
    "EnsembleStats",
    "CoupledSystem",
    "EnsembleCollapseError",
    "init_ensemble",
    "empirical_stats",
    "fpf_step",
    "coupled_step",
    "init_coupled",
    "error_processes",
    "mean_field_copy_step",
    "particle_process_noise",
    "particle_obs_perturbations",
    "snapshot_to_csv",
]

# Sub-stream purposes within one particle's stream.
_PURPOSE_INIT = 0
_PURPOSE_PROCESS = 1
_PURPOSE_OBS_PERTURB = 2


class EnsembleCollapseError(RuntimeError):
    """Empirical covariance is numerically singular where its inverse is needed."""


@dataclass(frozen=True)
class VariantParams:
    """Mixing weights (gamma1, gamma2) selecting a member of the exact family.

    (1, 0) is the stochastic linear FPF / square-root filter (the default),
    (1, 1) uses perturbed observations, (0, 0) is the deterministic filter.
    """

    gamma1: float = 1.0
    gamma2: float = 0.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2"):
            v = float(getattr(self, name))
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
            object.__setattr__(self, name, v)


STOCHASTIC_FPF = VariantParams(1.0, 0.0)
DETERMINISTIC_FPF = VariantParams(0.0, 0.0)
PERTURBED_OBSERVATION = VariantParams(1.0, 1.0)


@dataclass(frozen=True, eq=False)
class Ensemble:
    """N particle states at one time, with the variant that evolves them."""

    t: float
    states: np.ndarray  # (N, d)
    variant: VariantParams = STOCHASTIC_FPF

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if states.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 particles")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    """Empirical mean, unbiased covariance (divisor N-1), and centered errors."""

    mean: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d)
    errors: np.ndarray  # (N, d)


@dataclass(frozen=True, eq=False)
class CoupledSystem:
    """Finite-N ensemble plus N independent mean-field copies.

    Copy i shares particle i's initial draw and process-noise increments;
    the copies interact only through the exact filter moments.
    """

    ensemble: Ensemble
    copies: np.ndarray  # (N, d)

    def __post_init__(self):
        copies = np.atleast_2d(np.asarray(self.copies, dtype=float))
        if copies.shape != self.ensemble.states.shape:
            raise ValueError(
                f"copies shape {copies.shape} does not match ensemble "
                f"{self.ensemble.states.shape}"
            )
        copies.setflags(write=False)
        object.__setattr__(self, "copies", copies)

    @property
    def t(self) -> float:
        return self.ensemble.t

    @property
    def N(self) -> int:
        return self.ensemble.N


def init_ensemble(
    params: ModelParams,
    N: int,
    variant: VariantParams,
    noise: NoiseBundle,
    t0: float = 0.0,
) -> Ensemble:
    """Draw N i.i.d. particles from the prior, one stream per particle.

    Particle i's initial draw comes from ``noise.child(i, 0)``; its process
    and observation-perturbation increments use sub-streams 1 and 2 (see
    :func:`particle_process_noise`), so coupled constructions can replay
    exactly the same noise.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    L = psd_sqrt(params.Sigma0)
    states = np.empty((N, params.d))
    for i in range(N):
        z = noise.child(i, _PURPOSE_INIT).normals(params.d)
        states[i] = params.m0 + L @ z
    return Ensemble(t=t0, states=states, variant=variant)


def particle_process_noise(
    noise: NoiseBundle, N: int, grid: TimeGrid, d_B: int
) -> np.ndarray:
    """Pre-generated process increments for N particles, shape (n_steps, N, d_B)."""
    out = np.empty((grid.n_steps, N, d_B))
    for i in range(N):
        out[:, i, :] = noise.child(i, _PURPOSE_PROCESS).brownian(grid.n_steps, d_B, grid.dt)
    return out


def particle_obs_perturbations(
    noise: NoiseBundle, N: int, grid: TimeGrid, m: int
) -> np.ndarray:
    """Pre-generated observation perturbations, shape (n_steps, N, m)."""
    out = np.empty((grid.n_steps, N, m))
    for i in range(N):
        out[:, i, :] = noise.child(i, _PURPOSE_OBS_PERTURB).brownian(grid.n_steps, m, grid.dt)
    return out


def empirical_stats(ens: Ensemble) -> EnsembleStats:
    """Empirical mean, unbiased covariance, and error vectors of an ensemble."""
    x = ens.states
    N = x.shape[0]
    mean = x.mean(axis=0)
    errors = x - mean
    if ens.d == 1:
        e = errors[:, 0]
        cov = np.array([[float(e @ e) / (N - 1)]])
    else:
        cov = symmetrize(errors.T @ errors) / (N - 1)
    return EnsembleStats(mean=mean, cov=cov, errors=errors)


def _check_invertible(cov: np.ndarray) -> None:
    if cov.shape == (1, 1):
        w_min = tr = float(cov[0, 0])
    else:
        w_min = float(np.linalg.eigvalsh(cov).min())
        tr = float(np.trace(cov))
    if w_min <= 0.0 or w_min < 1e-10 * tr:
        raise EnsembleCollapseError(
            f"empirical covariance is numerically singular (min eig {w_min:.3e}, "
            f"trace {tr:.3e}); the gamma1 < 1 drift requires its inverse"
        )


def fpf_step(
    ens: Ensemble,
    stats: EnsembleStats,
    dZ_k: np.ndarray,
    dt: float,
    params: ModelParams,
    dB_k: np.ndarray | None = None,
    dW_k: np.ndarray | None = None,
    cov_override: np.ndarray | None = None,
) -> Ensemble:
    """Advance every particle by one Euler step.

    ``stats`` must be the empirical statistics of ``ens`` at the same time
    (the gain is frozen at the step's start).  ``dB_k`` are this step's
    process increments, shape (N, d_B); None means zero.  ``dW_k`` supplies
    the per-particle observation perturbations required when gamma2 > 0.
    ``cov_override`` replaces the empirical covariance in the gain and
    spread terms (test hook for forced-gain couplings).
    """
    g1 = ens.variant.gamma1
    g2 = ens.variant.gamma2
    S = stats.cov if cov_override is None else np.atleast_2d(np.asarray(cov_override, float))
    x = ens.states
    N = ens.N
    dZ_k = np.atleast_1d(np.asarray(dZ_k, dtype=float))
    if dZ_k.shape != (params.m,):
        raise ValueError(f"dZ_k has shape {dZ_k.shape}, expected {(params.m,)}")
    if dB_k is not None:
        dB_k = np.asarray(dB_k, dtype=float)
        if dB_k.shape != (N, params.d_B):
            raise ValueError(f"dB_k has shape {dB_k.shape}, expected {(N, params.d_B)}")
    if g2 > 0.0:
        if dW_k is None:
            raise ValueError("gamma2 > 0 requires per-particle dW_k perturbations")
        dW_k = np.asarray(dW_k, dtype=float)
        if dW_k.shape != (N, params.m):
            raise ValueError(f"dW_k has shape {dW_k.shape}, expected {(N, params.m)}")
    if g1 < 1.0:
        _check_invertible(S)

    if params.is_scalar:
        xf = x[:, 0]
        m = float(stats.mean[0])
        s_val = float(S[0, 0])
        a = float(params.A[0, 0])
        h = float(params.H[0, 0])
        sb = float(params.sigma_B[0, 0])
        K = s_val * h
        new = xf + (a * dt) * xf
        if dB_k is not None and g1 > 0.0:
            new = new + (g1 * sb) * dB_k[:, 0]
        if g1 < 1.0:
            new = new + (0.5 * (1.0 - g1 * g1) * float(params.Sigma_B[0, 0]) / s_val * dt) * (
                xf - m
            )
        pred = 0.5 * h * ((1.0 - g2 * g2) * m + (1.0 + g2 * g2) * xf)
        innov = float(dZ_k[0]) - pred * dt
        if g2 > 0.0:
            innov = innov + g2 * dW_k[:, 0]
        new = new + K * innov
        states = new[:, None]
    else:
        K = S @ params.H.T  # (d, m)
        new = x + (x @ params.A.T) * dt
        if dB_k is not None and g1 > 0.0:
            new = new + g1 * (dB_k @ params.sigma_B.T)
        if g1 < 1.0:
            G = 0.5 * (1.0 - g1 * g1) * (params.Sigma_B @ np.linalg.inv(S))
            new = new + ((x - stats.mean) @ G.T) * dt
        pred = 0.5 * ((1.0 - g2 * g2) * stats.mean + (1.0 + g2 * g2) * x)
        innov = dZ_k - (pred @ params.H.T) * dt
        if g2 > 0.0:
            innov = innov + g2 * dW_k
        states = new + innov @ K.T
    return Ensemble(t=ens.t + dt, states=states, variant=ens.variant)


def mean_field_copy_step(
    copies: np.ndarray,
    kf_mean: np.ndarray,
    kf_cov: np.ndarray,
    dZ_k: np.ndarray,
    dt: float,
    params: ModelParams,
    dB_k: np.ndarray | None = None,
) -> np.ndarray:
    """One Euler step of independent mean-field copies with the exact gain.

    Xbar^i <- Xbar^i + A Xbar^i dt + sigma_B dB^i
              + Sigma_t H^T (dZ - H (Xbar^i + m_t) dt / 2)
    where (m_t, Sigma_t) is the exact filter state at the same time.
    """
    x = np.asarray(copies, dtype=float)
    if params.is_scalar:
        xf = x[:, 0]
        a = float(params.A[0, 0])
        h = float(params.H[0, 0])
        sb = float(params.sigma_B[0, 0])
        K = float(kf_cov[0, 0]) * h
        m = float(kf_mean[0])
        new = xf + (a * dt) * xf
        if dB_k is not None:
            new = new + sb * np.asarray(dB_k, float)[:, 0]
        new = new + K * (float(np.atleast_1d(dZ_k)[0]) - 0.5 * h * (xf + m) * dt)
        return new[:, None]
    K = np.atleast_2d(kf_cov) @ params.H.T
    mean = np.atleast_1d(kf_mean)
    new = x + (x @ params.A.T) * dt
    if dB_k is not None:
        new = new + np.asarray(dB_k, float) @ params.sigma_B.T
    innov = np.atleast_1d(dZ_k) - 0.5 * ((x + mean) @ params.H.T) * dt
    return new + innov @ K.T


def init_coupled(ens: Ensemble) -> CoupledSystem:
    """Pair an initial ensemble with copies started at the same draws."""
    return CoupledSystem(ensemble=ens, copies=ens.states.copy())


def coupled_step(
    sys: CoupledSystem,
    kf_state,
    dZ_k: np.ndarray,
    dt: float,
    params: ModelParams,
    dB_k: np.ndarray | None = None,
    dW_k: np.ndarray | None = None,
    cov_override: np.ndarray | None = None,
) -> CoupledSystem:
    """Advance the ensemble and its mean-field copies with shared noise.

    ``kf_state`` must be the exact filter state at the system's current
    time; a mismatch means the caller's streams or clocks desynchronized.
    The same ``dB_k`` drives particle i and copy i.
    """
    if abs(kf_state.t - sys.t) > 1e-9:
        raise ValueError(
            f"filter state at t={kf_state.t} but coupled system at t={sys.t}; "
            "noise streams are out of sync"
        )
    stats = empirical_stats(sys.ensemble)
    new_ens = fpf_step(
        sys.ensemble, stats, dZ_k, dt, params,
        dB_k=dB_k, dW_k=dW_k, cov_override=cov_override,
    )
    new_copies = mean_field_copy_step(
        sys.copies, kf_state.mean, kf_state.cov, dZ_k, dt, params, dB_k=dB_k
    )
    return CoupledSystem(ensemble=new_ens, copies=new_copies)


def error_processes(sys: CoupledSystem, kf_state) -> tuple[np.ndarray, np.ndarray]:
    """Centered error views: xi^i = X^i - m^(N) and xibar^i = Xbar^i - m_t.

    These are derived quantities, not separately integrated processes.
    """
    x = sys.ensemble.states
    xi = x - x.mean(axis=0)
    xi_bar = sys.copies - np.atleast_1d(kf_state.mean)
    return xi, xi_bar


def snapshot_to_csv(ens: Ensemble, dest: Union[str, Path, IO[str]]) -> None:
    """CSV export of an ensemble snapshot: time, particle index, components."""
    header = ["time", "particle"] + [f"x{j}" for j in range(ens.d)]

    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(ens.states):
            w.writerow([repr(float(ens.t)), i] + [repr(float(v)) for v in row])

    if hasattr(dest, "write"):
        write(dest)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write(fh)
