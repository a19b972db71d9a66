"""Linear-Gaussian signal model: problem data, time grids, noise streams, paths.

The hidden state follows dX = A X dt + sigma_B dB and the observation record
accumulates dZ = H X dt + dW.  Everything downstream (Kalman-Bucy reference,
Riccati flows, particle systems) consumes the immutable objects defined here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Mapping, Union

import numpy as np

__all__ = [
    "ModelParams",
    "TimeGrid",
    "NoiseBundle",
    "ObservationIncrements",
    "AssumptionReport",
    "AssumptionError",
    "simulate_truth",
    "simulate_observations",
    "validate_assumptions",
    "path_to_csv",
    "symmetrize",
    "psd_sqrt",
    "STREAM_TRUTH",
    "STREAM_OBS",
    "STREAM_PARTICLE",
    "STREAM_OBS_PERTURB",
    "STREAM_COPIES",
    "STREAM_ALT_COPIES",
]

# Stream roles for the seed tree.  A stream id is a tuple of non-negative
# integers; the first components are assigned by the harness (experiment,
# N, trial) and these role tags come next.
STREAM_TRUTH = 0
STREAM_OBS = 1
STREAM_PARTICLE = 2
STREAM_OBS_PERTURB = 3
STREAM_COPIES = 4
STREAM_ALT_COPIES = 5

_PSD_TOL = 1e-10


class AssumptionError(RuntimeError):
    """A model assumption required by the requested operation does not hold."""


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Return the symmetric part (M + M^T) / 2."""
    return 0.5 * (M + M.T)


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix, eigenvalues clamped at zero."""
    w, V = np.linalg.eigh(S)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def _frozen_array(x, shape=None, name="array") -> np.ndarray:
    a = np.array(x, dtype=float)
    if shape is not None and a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Problem data (A, H, sigma_B, prior) for the linear-Gaussian filter.

    Shapes: A is d x d, H is m x d, sigma_B is d x d_B, m0 is a d-vector and
    Sigma0 is d x d symmetric PSD.  Sigma_B = sigma_B sigma_B^T is derived at
    construction, so the factorization identity holds by definition.  Whether
    the detectability / noise / stability assumptions hold is reported by
    :func:`validate_assumptions`, not enforced here: degenerate models
    (sigma_B = 0, Sigma0 = 0) are legitimate in edge-case runs.
    """

    A: np.ndarray
    H: np.ndarray
    sigma_B: np.ndarray
    m0: np.ndarray
    Sigma0: np.ndarray
    Sigma_B: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = A.shape[0]
        if A.shape != (d, d):
            raise ValueError(f"A must be square, got {A.shape}")
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if H.shape[1] != d:
            raise ValueError(f"H has {H.shape[1]} columns, expected {d}")
        sigma_B = np.atleast_2d(np.asarray(self.sigma_B, dtype=float))
        if sigma_B.shape[0] != d:
            raise ValueError(f"sigma_B has {sigma_B.shape[0]} rows, expected {d}")
        m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        Sigma0 = np.atleast_2d(np.asarray(self.Sigma0, dtype=float))
        if np.linalg.norm(Sigma0 - Sigma0.T, np.inf) > _PSD_TOL * max(
            1.0, float(np.abs(Sigma0).max())
        ):
            raise ValueError("Sigma0 must be symmetric")
        Sigma0 = symmetrize(Sigma0)
        if np.linalg.eigvalsh(Sigma0).min() < -_PSD_TOL * max(
            1.0, float(np.abs(Sigma0).max())
        ):
            raise ValueError("Sigma0 must be positive semi-definite")
        object.__setattr__(self, "A", _frozen_array(A, (d, d), "A"))
        object.__setattr__(self, "H", _frozen_array(H, (H.shape[0], d), "H"))
        object.__setattr__(
            self, "sigma_B", _frozen_array(sigma_B, (d, sigma_B.shape[1]), "sigma_B")
        )
        object.__setattr__(self, "m0", _frozen_array(m0, (d,), "m0"))
        object.__setattr__(self, "Sigma0", _frozen_array(Sigma0, (d, d), "Sigma0"))
        object.__setattr__(
            self, "Sigma_B", _frozen_array(sigma_B @ sigma_B.T, (d, d), "Sigma_B")
        )

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def d_B(self) -> int:
        return self.sigma_B.shape[1]

    @property
    def is_scalar(self) -> bool:
        return self.d == 1 and self.m == 1 and self.d_B == 1

    @classmethod
    def scalar(cls, a: float, h: float, sigma_b: float, m0: float, sigma0: float) -> "ModelParams":
        """Convenience constructor for the d = m = 1 case."""
        return cls(
            A=[[float(a)]],
            H=[[float(h)]],
            sigma_B=[[float(sigma_b)]],
            m0=[float(m0)],
            Sigma0=[[float(sigma0)]],
        )

    @classmethod
    def from_config(cls, cfg: Mapping) -> "ModelParams":
        """Build from a configuration mapping.

        Expected keys: ``d``, ``m``, ``d_B`` (dimensions) and ``A``, ``H``,
        ``sigma_B``, ``m0``, ``Sigma0`` as flat row-major lists.
        """
        d = int(cfg["d"])
        m = int(cfg["m"])
        d_B = int(cfg["d_B"])

        def grab(key, rows, cols):
            flat = np.asarray(cfg[key], dtype=float).ravel()
            if flat.size != rows * cols:
                raise ValueError(
                    f"config key {key!r} has {flat.size} entries, expected {rows * cols}"
                )
            return flat.reshape(rows, cols)

        return cls(
            A=grab("A", d, d),
            H=grab("H", m, d),
            sigma_B=grab("sigma_B", d, d_B),
            m0=np.asarray(cfg["m0"], dtype=float).reshape(d),
            Sigma0=grab("Sigma0", d, d),
        )

    @classmethod
    def from_config_file(cls, path: Union[str, Path]) -> "ModelParams":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_config(json.load(fh))

    def to_config(self) -> dict:
        return {
            "d": self.d,
            "m": self.m,
            "d_B": self.d_B,
            "A": self.A.ravel().tolist(),
            "H": self.H.ravel().tolist(),
            "sigma_B": self.sigma_B.ravel().tolist(),
            "m0": self.m0.tolist(),
            "Sigma0": self.Sigma0.ravel().tolist(),
        }


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [t0, T] with step dt; n_steps = round(T / dt)."""

    T: float
    dt: float
    t0: float = 0.0
    n_steps: int = field(init=False, compare=False)

    def __post_init__(self):
        if not (self.dt > 0.0):
            raise ValueError("dt must be positive")
        if not (self.T > self.t0):
            raise ValueError("T must exceed t0")
        span = self.T - self.t0
        n = int(round(span / self.dt))
        if n < 1 or abs(n * self.dt - span) > 1e-9 * max(1.0, abs(span)):
            raise ValueError(
                f"grid mismatch: {n} steps of dt={self.dt} do not reach T-t0={span}"
            )
        object.__setattr__(self, "n_steps", n)

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of a node time; raises if t is not on the grid."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.t0 + k * self.dt - t) > 1e-9:
            raise ValueError(f"t={t} is not a node of this grid")
        return k

    def refined(self) -> "TimeGrid":
        """The grid with half the step size (same span)."""
        return TimeGrid(T=self.T, dt=self.dt / 2.0, t0=self.t0)


def _as_stream(stream_id) -> tuple:
    if isinstance(stream_id, (int, np.integer)):
        stream = (int(stream_id),)
    else:
        stream = tuple(int(s) for s in stream_id)
    if any(s < 0 for s in stream):
        raise ValueError("stream id components must be non-negative")
    return stream


@dataclass(frozen=True)
class NoiseBundle:
    """A named, reproducible random stream.

    Streams are realized with the counter-based Philox generator keyed by
    ``SeedSequence(entropy=seed, spawn_key=stream_id)``, so equal
    (seed, stream_id) pairs replay bit-identical draws and distinct stream
    ids are independent by construction of the seed-sequence spawn tree.
    """

    seed: int
    stream_id: tuple = ()

    def __post_init__(self):
        seed = int(self.seed)
        if seed < 0:
            raise ValueError("seed must be non-negative")
        object.__setattr__(self, "seed", seed)
        object.__setattr__(self, "stream_id", _as_stream(self.stream_id))

    def child(self, *ids: int) -> "NoiseBundle":
        return NoiseBundle(self.seed, self.stream_id + _as_stream(ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.Philox(seed=ss))

    def normals(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def brownian(self, n_steps: int, dim: int, dt: float) -> np.ndarray:
        """Pre-generated Wiener increments, shape (n_steps, dim), each N(0, dt I)."""
        return self.generator().standard_normal((n_steps, dim)) * np.sqrt(dt)


@dataclass(frozen=True, eq=False)
class ObservationIncrements:
    """Immutable record of observation increments dZ_k on a grid."""

    dZ: np.ndarray  # (n_steps, m)

    def __post_init__(self):
        dZ = np.atleast_2d(np.asarray(self.dZ, dtype=float))
        dZ.setflags(write=False)
        object.__setattr__(self, "dZ", dZ)

    @property
    def n_steps(self) -> int:
        return self.dZ.shape[0]

    @property
    def m(self) -> int:
        return self.dZ.shape[1]


def simulate_truth(
    params: ModelParams,
    grid: TimeGrid,
    noise: NoiseBundle,
    dB: np.ndarray | None = None,
) -> np.ndarray:
    """Euler-Maruyama path of the hidden state, shape (n_steps + 1, d).

    X_0 ~ N(m0, Sigma0) is drawn first from the stream, then the Brownian
    increments, so paths at two resolutions sharing a stream also share X_0.
    ``dB`` overrides the stream increments (test hook for coupled-refinement
    runs); it must have shape (n_steps, d_B).
    """
    rng = noise.generator()
    z = rng.standard_normal(params.d)
    x0 = params.m0 + psd_sqrt(params.Sigma0) @ z
    n = grid.n_steps
    if dB is None:
        dB = rng.standard_normal((n, params.d_B)) * np.sqrt(grid.dt)
    else:
        dB = np.asarray(dB, dtype=float)
        if dB.shape != (n, params.d_B):
            raise ValueError(f"dB has shape {dB.shape}, expected {(n, params.d_B)}")
    path = np.empty((n + 1, params.d))
    path[0] = x0
    dt = grid.dt
    if params.is_scalar:
        a = float(params.A[0, 0])
        s = float(params.sigma_B[0, 0])
        x = float(x0[0])
        db = dB[:, 0].tolist()
        out = path[:, 0]
        for k in range(n):
            x = x + a * x * dt + s * db[k]
            out[k + 1] = x
    else:
        A = params.A
        sB = params.sigma_B
        x = x0
        for k in range(n):
            x = x + (A @ x) * dt + sB @ dB[k]
            path[k + 1] = x
    path.setflags(write=False)
    return path


def simulate_observations(
    params: ModelParams,
    grid: TimeGrid,
    truth: np.ndarray,
    noise: NoiseBundle,
    dW: np.ndarray | None = None,
) -> ObservationIncrements:
    """Observation increments dZ_k = H X_{t_k} dt + dW_k on the truth's grid.

    ``dW`` overrides the stream increments (test hook); shape (n_steps, m).
    """
    truth = np.asarray(truth, dtype=float)
    n = grid.n_steps
    if truth.shape != (n + 1, params.d):
        raise ValueError(
            f"truth has shape {truth.shape}, expected {(n + 1, params.d)}"
        )
    if dW is None:
        dW = noise.brownian(n, params.m, grid.dt)
    else:
        dW = np.asarray(dW, dtype=float)
        if dW.shape != (n, params.m):
            raise ValueError(f"dW has shape {dW.shape}, expected {(n, params.m)}")
    dZ = truth[:-1] @ params.H.T * grid.dt + dW
    return ObservationIncrements(dZ=dZ)


@dataclass(frozen=True)
class AssumptionReport:
    """Outcome of the detectability / noise / stability checks.

    a1: (A, H) detectable and (A, sigma_B) stabilizable (Hautus rank tests).
    a2: Sigma_B positive definite.
    a3: A asymptotically stable, i.e. mu_A = min(-Re eig(A)) > 0.
    """

    a1: bool
    a2: bool
    a3: bool
    detectable: bool
    stabilizable: bool
    mu_A: float
    sigma_B_min_eig: float

    @property
    def all_hold(self) -> bool:
        return self.a1 and self.a2 and self.a3

    def require(self, *names: str) -> None:
        failed = [n for n in names if not getattr(self, n)]
        if failed:
            raise AssumptionError(f"required assumption(s) {failed} do not hold")


def validate_assumptions(params: ModelParams, re_tol: float = 1e-10) -> AssumptionReport:
    """Check the model assumptions; reports flags, never raises.

    The Hautus tests evaluate rank [lambda I - A; H] (detectability) and
    rank [lambda I - A, sigma_B] (stabilizability) at every eigenvalue of A
    with real part >= -re_tol.  Ranks use the SVD threshold
    max(dim) * eps * sigma_max (numpy's matrix_rank default).
    """
    d = params.d
    eigs = np.linalg.eigvals(params.A)
    I = np.eye(d)
    detectable = True
    stabilizable = True
    for lam in eigs:
        if lam.real < -re_tol:
            continue
        M_det = np.vstack([lam * I - params.A, params.H.astype(complex)])
        if np.linalg.matrix_rank(M_det) < d:
            detectable = False
        M_stab = np.hstack([lam * I - params.A, params.sigma_B.astype(complex)])
        if np.linalg.matrix_rank(M_stab) < d:
            stabilizable = False
    sig_eigs = np.linalg.eigvalsh(params.Sigma_B)
    min_eig = float(sig_eigs.min())
    a2 = min_eig > 1e-10 * max(1.0, float(sig_eigs.max()))
    mu_A = float(np.min(-eigs.real))
    a3 = mu_A > re_tol
    return AssumptionReport(
        a1=detectable and stabilizable,
        a2=a2,
        a3=a3,
        detectable=detectable,
        stabilizable=stabilizable,
        mu_A=mu_A,
        sigma_B_min_eig=min_eig,
    )


def path_to_csv(times: np.ndarray, path: np.ndarray, dest: Union[str, Path, IO[str]]) -> None:
    """Write a state path as CSV rows ``time,component,value``."""
    path = np.atleast_2d(np.asarray(path, dtype=float))
    if path.shape[0] != len(times):
        raise ValueError("times and path lengths differ")

    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "component", "value"])
        for t, row in zip(times, path):
            for j, v in enumerate(row):
                w.writerow([repr(float(t)), j, repr(float(v))])

    if hasattr(dest, "write"):
        write(dest)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write(fh)
