"""Sufficient statistics, objectives and optimality checks.

A regression problem ``z_i ~ tr(W^T M_i)`` is reduced to its empirical moments
``sigma_mm = (1/n) sum vec(M_i) vec(M_i)^T`` and ``Q = (1/n) sum z_i M_i``.
Everything downstream consumes only those two quantities.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import InvalidInput
from .spectral import DEFAULT_TAU_RANK, full_svd, spectral_norm, trace_norm, unvec, vec

log = logging.getLogger(__name__)

_CHUNK = 4096


@dataclass(frozen=True)
class Observation:
    """One ``(M, z)`` pair; ``M`` is dense or the outer product ``x y^T``."""

    z: float
    M: np.ndarray | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None

    def __post_init__(self):
        if self.M is None and (self.x is None or self.y is None):
            raise InvalidInput("observation needs M or both x and y")
        if not np.isfinite(self.z):
            raise InvalidInput("non-finite response")

    @property
    def factored(self) -> bool:
        return self.M is None

    @property
    def shape(self) -> tuple[int, int]:
        if self.M is not None:
            return np.shape(self.M)
        return (len(self.x), len(self.y))

    def matrix(self) -> np.ndarray:
        if self.M is not None:
            return np.asarray(self.M, dtype=float)
        return np.outer(self.x, self.y)


@dataclass(frozen=True, eq=False)
class ObservationSet(Sequence):
    """Array-backed batch of observations.

    Either ``X`` (n x p) and ``Y`` (n x q) for rank-one ``M_i = x_i y_i^T``, or
    ``M`` (n x p x q) for dense covariates. Behaves as a sequence of
    :class:`Observation`.
    """

    z: np.ndarray
    X: np.ndarray | None = None
    Y: np.ndarray | None = None
    M: np.ndarray | None = None
    pairs: np.ndarray | None = None

    @property
    def factored(self) -> bool:
        return self.M is None

    @property
    def p(self) -> int:
        return self.X.shape[1] if self.factored else self.M.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1] if self.factored else self.M.shape[2]

    def __len__(self) -> int:
        return len(self.z)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if self.factored:
            return Observation(z=float(self.z[i]), x=self.X[i], y=self.Y[i])
        return Observation(z=float(self.z[i]), M=self.M[i])

    def __iter__(self) -> Iterator[Observation]:
        return (self[i] for i in range(len(self)))

    def vec_rows(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Rows ``vec(M_i)`` for ``i`` in ``[start, stop)``."""
        stop = len(self) if stop is None else stop
        if self.factored:
            X, Y = self.X[start:stop], self.Y[start:stop]
            # vec(x y^T)[b*p + a] = y_b x_a
            return (Y[:, :, None] * X[:, None, :]).reshape(stop - start, -1)
        Ms = self.M[start:stop]
        return Ms.transpose(0, 2, 1).reshape(stop - start, -1)


@dataclass(frozen=True, eq=False)
class EmpiricalMoments:
    sigma_mm: np.ndarray
    Q: np.ndarray
    n: int
    p: int
    q: int

    def __post_init__(self):
        pq = self.p * self.q
        if self.sigma_mm.shape != (pq, pq) or self.Q.shape != (self.p, self.q):
            raise InvalidInput(
                f"inconsistent moments: sigma_mm {self.sigma_mm.shape}, Q {self.Q.shape}, p={self.p}, q={self.q}"
            )

    @classmethod
    def from_arrays(cls, sigma_mm, Q, n: int = 1) -> "EmpiricalMoments":
        Q = np.asarray(Q, dtype=float)
        if Q.ndim != 2:
            raise InvalidInput("Q must be a matrix")
        S = np.asarray(sigma_mm, dtype=float)
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(Q))):
            raise InvalidInput("non-finite moments")
        return cls(sigma_mm=S, Q=Q, n=int(n), p=Q.shape[0], q=Q.shape[1])

    def merge(self, other: "EmpiricalMoments") -> "EmpiricalMoments":
        """Pool two moment pairs (count-weighted average); associative."""
        if (self.p, self.q) != (other.p, other.q):
            raise InvalidInput("cannot merge moments of different dimensions")
        n = self.n + other.n
        a, b = self.n / n, other.n / n
        return EmpiricalMoments(
            sigma_mm=a * self.sigma_mm + b * other.sigma_mm,
            Q=a * self.Q + b * other.Q,
            n=n,
            p=self.p,
            q=self.q,
        )

    @property
    def q_vec(self) -> np.ndarray:
        return vec(self.Q)


class _Kahan:
    """Compensated accumulator for array-valued partial sums."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, x):
        y = x - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t


def _as_observation_set(observations) -> ObservationSet:
    if isinstance(observations, ObservationSet):
        return observations
    obs = list(observations)
    if not obs:
        raise InvalidInput("empty observation list")
    shape = obs[0].shape
    for i, o in enumerate(obs):
        if o.shape != shape:
            raise InvalidInput(f"observation {i} has shape {o.shape}, expected {shape}")
    z = np.array([o.z for o in obs], dtype=float)
    if all(o.factored for o in obs):
        return ObservationSet(
            z=z,
            X=np.array([np.asarray(o.x, float) for o in obs]),
            Y=np.array([np.asarray(o.y, float) for o in obs]),
        )
    return ObservationSet(z=z, M=np.array([o.matrix() for o in obs]))


def assemble_moments(observations: Iterable[Observation] | ObservationSet) -> EmpiricalMoments:
    """Empirical second moment and cross moment of an observation set.

    Partial sums over blocks of rows are formed by BLAS and combined with
    compensated summation.
    """
    obs = _as_observation_set(observations)
    n = len(obs)
    if n == 0:
        raise InvalidInput("empty observation list")
    p, q = obs.p, obs.q
    if not (np.all(np.isfinite(obs.z)) and all(
        a is None or np.all(np.isfinite(a)) for a in (obs.X, obs.Y, obs.M)
    )):
        raise InvalidInput("non-finite observation entries")
    S = _Kahan((p * q, p * q))
    c = _Kahan(p * q)
    for start in range(0, n, _CHUNK):
        stop = min(n, start + _CHUNK)
        R = obs.vec_rows(start, stop)
        S.add(R.T @ R)
        c.add(R.T @ obs.z[start:stop])
    sigma = S.total / n
    sigma = 0.5 * (sigma + sigma.T)
    return EmpiricalMoments(sigma_mm=sigma, Q=unvec(c.total / n, p, q), n=n, p=p, q=q)


# ---------------------------------------------------------------------------
# objectives and optimality


def _check_W(W, moments: EmpiricalMoments) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.shape != (moments.p, moments.q):
        raise InvalidInput(f"W has shape {W.shape}, expected {(moments.p, moments.q)}")
    return W


def quadratic_part(W, moments: EmpiricalMoments) -> float:
    w = vec(W)
    return float(0.5 * w @ moments.sigma_mm @ w - w @ moments.q_vec)


def objective_value(W, moments: EmpiricalMoments, lam: float, raw_data=None):
    """Penalised least-squares objective in moment form.

    With ``raw_data`` the residual-sum form ``(1/2n) sum (z_i - tr W^T M_i)^2 +
    lam ||W||_*`` is evaluated too and ``(moment_value, raw_value)`` is
    returned; the two must differ by ``(1/2n) sum z_i^2``.
    """
    if lam < 0:
        raise InvalidInput("lambda must be nonnegative")
    W = _check_W(W, moments)
    value = quadratic_part(W, moments) + lam * trace_norm(W)
    if raw_data is None:
        return value
    obs = _as_observation_set(raw_data)
    if (obs.p, obs.q) != (moments.p, moments.q):
        raise InvalidInput("raw data dimensions do not match the moments")
    w = vec(W)
    resid = np.concatenate(
        [obs.z[a:b] - obs.vec_rows(a, b) @ w for a, b in _chunks(len(obs))]
    )
    raw = float(0.5 * np.mean(resid**2) + lam * trace_norm(W))
    const = 0.5 * float(np.mean(obs.z**2))
    if not np.isclose(raw - value, const, rtol=1e-8, atol=1e-10 * max(1.0, abs(raw))):
        raise InvalidInput("raw data do not match the supplied moments")
    return value, raw


def _chunks(n: int):
    for a in range(0, n, _CHUNK):
        yield a, min(n, a + _CHUNK)


@dataclass(frozen=True)
class KKTReport:
    alignment_residual: float
    dual_excess: float
    rank: int
    optimal: bool
    simultaneous_svd: bool
    gradient: np.ndarray = field(repr=False)


def kkt_residual(W, moments: EmpiricalMoments, lam: float, tol: float = 1e-8,
                 tau_rank: float = DEFAULT_TAU_RANK) -> KKTReport:
    """Check the subgradient optimality conditions at ``W``.

    With ``G = sigma_mm W - Q`` and ``W = U diag(s) V^T`` truncated at the
    numerical rank, optimality means ``G + lam U V^T + N = 0`` with ``N`` the
    part of ``-G`` outside both singular subspaces and ``||N||_2 <= lam``.
    """
    if lam <= 0:
        raise InvalidInput("lambda must be positive")
    W = _check_W(W, moments)
    G = unvec(moments.sigma_mm @ vec(W), moments.p, moments.q) - moments.Q
    t = full_svd(W, tau_rank)
    U, _, V = t.truncated()
    GN = G - U @ (U.T @ G)
    GN = GN - (GN @ V) @ V.T
    N = -GN
    resid = G + lam * (U @ V.T) + N
    alignment = float(np.linalg.norm(resid))
    excess = spectral_norm(N) - lam
    scale = max(1.0, float(np.linalg.norm(moments.Q)))
    ok_align = alignment <= tol * scale
    ok_dual = excess <= tol * lam
    # -G/lam must share W's leading singular vectors with singular values one
    simultaneous = ok_align and np.allclose(U.T @ G @ V, -lam * np.eye(t.numerical_rank),
                                            atol=tol * scale)
    return KKTReport(alignment, excess, t.numerical_rank, bool(ok_align and ok_dual),
                     bool(simultaneous), G)


# ---------------------------------------------------------------------------
# design embeddings (Lasso / group Lasso as trace-norm problems)


@dataclass(frozen=True, eq=False)
class DesignEmbedding:
    """Linear map ``x -> vec(M) = H x`` from implicit parameters to matrices."""

    H: np.ndarray
    group_sizes: tuple[int, ...]
    kind: str
    p: int
    q: int

    def matrix(self, x) -> np.ndarray:
        return unvec(self.H @ np.asarray(x, float), self.p, self.q)

    def parameters(self, M) -> np.ndarray:
        return self.H.T @ vec(M)


def embed_design(kind: str, dims) -> DesignEmbedding:
    """Selection matrix for Lasso (``M = Diag(x)``) or group Lasso designs.

    For ``group_lasso`` with sizes ``d_1..d_m`` the covariate is the
    ``(sum d_j) x m`` block-diagonal matrix whose column ``j`` holds ``x_j``.
    """
    if kind == "lasso":
        m = int(dims) if np.isscalar(dims) else len(dims)
        if np.ndim(dims) and any(int(d) != 1 for d in dims):
            raise InvalidInput("lasso groups must all have size 1")
        sizes = (1,) * m
    elif kind == "group_lasso":
        sizes = tuple(int(d) for d in dims)
    else:
        raise InvalidInput(f"unknown design kind {kind!r}")
    if not sizes or any(d <= 0 for d in sizes):
        raise InvalidInput("block sizes must be positive")
    m = len(sizes)
    p = m if kind == "lasso" else sum(sizes)
    q = m
    s = sum(sizes)
    H = np.zeros((p * q, s))
    col = 0
    row = 0
    for j, d in enumerate(sizes):
        for t in range(d):
            H[j * p + row + t, col] = 1.0
            col += 1
        row += d
    return DesignEmbedding(H=H, group_sizes=sizes, kind=kind, p=p, q=q)


# ---------------------------------------------------------------------------
# CSV + manifest I/O


def _manifest_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".json")


def write_observations(path, obs: ObservationSet, metadata: dict | None = None) -> Path:
    """Write ``obs`` as CSV with a ``{p, q, factored}`` JSON sidecar."""
    path = Path(path)
    p, q = obs.p, obs.q
    if obs.factored:
        header = [f"x{i + 1}" for i in range(p)] + [f"y{j + 1}" for j in range(q)] + ["z"]
        rows = np.column_stack([obs.X, obs.Y, obs.z])
    else:
        header = [f"m{i + 1}_{j + 1}" for j in range(q) for i in range(p)] + ["z"]
        rows = np.column_stack([obs.vec_rows(), obs.z])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    manifest = {"p": p, "q": q, "factored": obs.factored}
    if metadata:
        manifest["metadata"] = metadata
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_observations(path, manifest=None) -> ObservationSet:
    """Read a CSV dataset; dimensions come from the JSON sidecar.

    Raises InvalidInput naming the first malformed row (1-based, header is
    row 1).
    """
    path = Path(path)
    mpath = Path(manifest) if manifest is not None else _manifest_path(path)
    try:
        meta = json.loads(mpath.read_text())
        p, q, factored = int(meta["p"]), int(meta["q"]), bool(meta["factored"])
    except FileNotFoundError as exc:
        raise InvalidInput(f"missing manifest {mpath}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise InvalidInput(f"bad manifest {mpath}: {exc}") from exc
    width = p + q + 1 if factored else p * q + 1
    values = []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or len(header) != width:
                raise InvalidInput(f"row 1: header has {0 if header is None else len(header)} columns, expected {width}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != width:
                    raise InvalidInput(f"row {lineno}: expected {width} fields, got {len(row)}", )
                try:
                    vals = [float(v) for v in row]
                except ValueError as exc:
                    raise InvalidInput(f"row {lineno}: {exc}") from exc
                if not all(np.isfinite(vals)):
                    raise InvalidInput(f"row {lineno}: non-finite value")
                values.append(vals)
    except FileNotFoundError as exc:
        raise InvalidInput(f"missing dataset {path}") from exc
    if not values:
        raise InvalidInput("dataset has no observations")
    A = np.array(values)
    if factored:
        return ObservationSet(z=A[:, -1], X=A[:, :p], Y=A[:, p:p + q])
    M = A[:, :-1].reshape(len(A), q, p).transpose(0, 2, 1)
    return ObservationSet(z=A[:, -1], M=np.ascontiguousarray(M))
