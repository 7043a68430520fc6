"""Seeded synthetic problems: low-rank truth, designs and samplers.

Randomness comes from Philox streams keyed by ``(seed, stream, *index)`` so
each component (truth, row design, column design, samples of replicate k) has
an independent generator that does not depend on call order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .consistency import GroundTruthModel
from .errors import InvalidInput
from .problem import ObservationSet
from .spectral import _fix_signs

_STREAMS = {"truth": 0, "design_x": 1, "design_y": 2, "samples": 3, "designs": 4}


def rng_stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent Philox generator for a named stream."""
    key = (_STREAMS[name],) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SyntheticSpec:
    """Problem dimensions, sampling mode and design.

    ``design`` is ``identity``, ``random_pd`` (with ``condition_target``, a
    scalar or an ``(x, y)`` pair) or ``explicit`` (``sigma_xx``/``sigma_yy``).
    """

    p: int = 4
    q: int = 4
    r: int = 2
    n: int = 1000
    sigma_noise: float = 1.0
    mode: str = "iid"
    n_x: int | None = None
    n_y: int | None = None
    design: str = "identity"
    condition_target: float | tuple = 10.0
    sigma_xx: np.ndarray | None = field(default=None, compare=False)
    sigma_yy: np.ndarray | None = field(default=None, compare=False)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.r < min(self.p, self.q):
            raise InvalidInput("need 0 < r < min(p, q)")
        if self.n < 1:
            raise InvalidInput("n must be positive")
        if self.sigma_noise < 0:
            raise InvalidInput("sigma_noise must be nonnegative")
        if self.mode not in ("iid", "collaborative"):
            raise InvalidInput(f"unknown mode {self.mode!r}")
        if self.mode == "collaborative":
            if not self.n_x or not self.n_y:
                raise InvalidInput("collaborative mode needs n_x and n_y")
            if self.n > self.n_x * self.n_y:
                raise InvalidInput("collaborative mode needs n <= n_x * n_y")
        if self.design not in ("identity", "random_pd", "explicit"):
            raise InvalidInput(f"unknown design {self.design!r}")
        if self.design == "explicit" and (self.sigma_xx is None or self.sigma_yy is None):
            raise InvalidInput("explicit design needs sigma_xx and sigma_yy")
        if min(np.atleast_1d(self.condition_target)) < 1:
            raise InvalidInput("condition_target must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("sigma_xx", "sigma_yy"):
            if d[k] is not None:
                d[k] = np.asarray(d[k]).tolist()
        if isinstance(d["condition_target"], tuple):
            d["condition_target"] = list(d["condition_target"])
        return d


def make_design(dim: int, kind: str = "identity", seed: int = 0, condition_target: float = 10.0,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Identity or a random SPD matrix with prescribed condition number.

    ``random_pd`` takes the eigenvectors of a Wishart matrix ``G^T G`` and
    raises its spectrum to the power that makes the condition number equal to
    ``condition_target``; the trace is normalised to ``dim``.
    """
    if condition_target < 1:
        raise InvalidInput("condition_target must be >= 1")
    if kind == "identity":
        return np.eye(dim)
    if kind != "random_pd":
        raise InvalidInput(f"unknown design kind {kind!r}")
    rng = rng if rng is not None else rng_stream(seed, "designs", dim)
    G = rng.standard_normal((dim + 2, dim))
    evals, evecs = np.linalg.eigh(G.T @ G)
    evals = np.maximum(evals, 1e-12 * evals[-1])
    spread = np.log(evals[-1] / evals[0])
    if dim == 1 or spread <= 0:
        lam = np.ones(dim)
    else:
        lam = np.exp(np.log(evals / evals[-1]) * np.log(condition_target) / spread)
    lam *= dim / lam.sum()
    S = (evecs * lam) @ evecs.T
    return 0.5 * (S + S.T)


def _designs(spec: SyntheticSpec):
    if spec.design == "identity":
        return np.eye(spec.p), np.eye(spec.q)
    if spec.design == "explicit":
        return np.asarray(spec.sigma_xx, float), np.asarray(spec.sigma_yy, float)
    cx, cy = (spec.condition_target if np.ndim(spec.condition_target)
              else (spec.condition_target, spec.condition_target))
    Sx = make_design(spec.p, "random_pd", condition_target=float(cx), rng=rng_stream(spec.seed, "design_x"))
    Sy = make_design(spec.q, "random_pd", condition_target=float(cy), rng=rng_stream(spec.seed, "design_y"))
    return Sx, Sy


def generate_ground_truth(spec: SyntheticSpec) -> GroundTruthModel:
    """Gaussian factor product ``G1 G2^T`` of rank ``r`` with the spec's design.

    Draws whose singular values are not distinct (relative gap < 1e-6) are
    resampled.
    """
    rng = rng_stream(spec.seed, "truth")
    for _ in range(100):
        W = rng.standard_normal((spec.p, spec.r)) @ rng.standard_normal((spec.q, spec.r)).T
        U, s, Vt = np.linalg.svd(W, full_matrices=False)
        top = s[: spec.r]
        if np.all(np.diff(top) < -1e-6 * top[0]) and top[-1] > 1e-6 * top[0]:
            break
    else:  # pragma: no cover - probability zero
        raise RuntimeError("could not draw a generic ground truth")
    U, V = _fix_signs(U[:, : spec.r], Vt[: spec.r].T, spec.r)
    Sx, Sy = _designs(spec)
    return GroundTruthModel(U=U, s=top.copy(), V=V, sigma_mm=np.kron(Sy, Sx),
                            sigma_noise=spec.sigma_noise, sigma_xx=Sx, sigma_yy=Sy)


def _gaussian(rng, n, S):
    L = np.linalg.cholesky(S)
    return rng.standard_normal((n, S.shape[0])) @ L.T


def _responses(rng, X, Y, W, sigma):
    z = np.einsum("ia,ab,ib->i", X, W, Y)
    if sigma > 0:
        z = z + sigma * rng.standard_normal(len(z))
    return z


def sample_iid(spec: SyntheticSpec, model: GroundTruthModel, replicate: int = 0) -> ObservationSet:
    """``n`` independent rank-one covariates ``x y^T`` with Gaussian noise."""
    if spec.mode != "iid":
        raise InvalidInput("spec is not in iid mode")
    rng = rng_stream(spec.seed, "samples", replicate)
    X = _gaussian(rng, spec.n, model.sigma_xx)
    Y = _gaussian(rng, spec.n, model.sigma_yy)
    z = _responses(rng, X, Y, model.W, spec.sigma_noise)
    return ObservationSet(z=z, X=X, Y=Y)


def sample_collaborative(spec: SyntheticSpec, model: GroundTruthModel, replicate: int = 0) -> ObservationSet:
    """``n`` distinct cells of an ``n_x x n_y`` grid of row/column features."""
    if spec.mode != "collaborative":
        raise InvalidInput("spec is not in collaborative mode")
    if spec.n > spec.n_x * spec.n_y:
        raise InvalidInput("n exceeds the number of grid cells")
    rng = rng_stream(spec.seed, "samples", replicate)
    Xt = _gaussian(rng, spec.n_x, model.sigma_xx)
    Yt = _gaussian(rng, spec.n_y, model.sigma_yy)
    cells = rng.choice(spec.n_x * spec.n_y, size=spec.n, replace=False)
    i, j = np.divmod(cells, spec.n_y)
    X, Y = Xt[i], Yt[j]
    z = _responses(rng, X, Y, model.W, spec.sigma_noise)
    return ObservationSet(z=z, X=X, Y=Y, pairs=np.column_stack([i, j]))


def sample(spec: SyntheticSpec, model: GroundTruthModel, replicate: int = 0) -> ObservationSet:
    if spec.mode == "iid":
        return sample_iid(spec, model, replicate)
    return sample_collaborative(spec, model, replicate)
