"""Per-example latent codes on the unit hypersphere and geometry on them.

All geometric helpers are pure functions over torch tensors whose last
dimension is the latent dimension; leading dimensions broadcast.  They keep
the input dtype, so callers that need tight tolerances can work in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import (
    CapacityError,
    DegenerateInputError,
    DegeneratePairError,
    InvalidArgumentError,
    MissingCodeError,
)

UNLABELED = -1

# sin(angle) below this switches slerp to its lerp limit
PARALLEL_EPS = 1e-7
_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise fed to the generator alongside a code.

    ``noise_dim == 0`` disables concatenation.  ``sigma`` is the standard
    deviation of each noise coordinate.
    """

    noise_dim: int = 32
    sigma: float = 0.1

    def __post_init__(self):
        if self.noise_dim < 0:
            raise InvalidArgumentError(f"noise_dim must be >= 0, got {self.noise_dim}")
        if self.sigma < 0:
            raise InvalidArgumentError(f"sigma must be >= 0, got {self.sigma}")


def _as_tensor(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    arr = np.asarray(v)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return torch.from_numpy(arr)


def project_to_sphere(v) -> torch.Tensor:
    v = _as_tensor(v)
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    if bool((norm < _ZERO_NORM).any()):
        raise DegenerateInputError("cannot project a zero vector onto the sphere")
    return v / norm


def angle_between(q1, q2) -> torch.Tensor:
    """Angle between unit vectors, accurate near 0 and near pi."""
    q1, q2 = _as_tensor(q1), _as_tensor(q2)
    diff = torch.linalg.vector_norm(q1 - q2, dim=-1)
    summ = torch.linalg.vector_norm(q1 + q2, dim=-1)
    return 2.0 * torch.atan2(diff, summ)


def _t_like(t, ref: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=ref.dtype)
    if bool(((t < 0) | (t > 1)).any()):
        raise InvalidArgumentError("interpolation factor must lie in [0, 1]")
    return t


def lerp(q1, q2, t) -> torch.Tensor:
    """Linear interpolation, re-projected so the result stays a valid code."""
    q1, q2 = _as_tensor(q1), _as_tensor(q2)
    t = _t_like(t, q1)
    if t.ndim:
        t = t.unsqueeze(-1)
    mixed = (1 - t) * q1 + t * q2
    norm = torch.linalg.vector_norm(mixed, dim=-1, keepdim=True)
    if bool((norm < PARALLEL_EPS).any()):
        raise DegeneratePairError("linear interpolation passes through the origin")
    return mixed / norm


def slerp(q1, q2, t) -> torch.Tensor:
    """Constant-speed great-circle interpolation between unit vectors.

    ``t`` is a scalar or has the leading shape of ``q1``.  Near-parallel
    pairs fall back to :func:`lerp`; antipodal pairs raise
    :class:`DegeneratePairError` because no unique great circle exists.
    """
    q1, q2 = _as_tensor(q1), _as_tensor(q2)
    q1, q2 = torch.broadcast_tensors(q1, q2)
    t = _t_like(t, q1)
    if t.ndim:
        t = t.unsqueeze(-1)
    theta = angle_between(q1, q2).unsqueeze(-1)
    sin_theta = torch.sin(theta)
    near = sin_theta < PARALLEL_EPS
    if bool((near & (theta > math.pi / 2)).any()):
        raise DegeneratePairError("antipodal codes have no unique slerp path")
    if bool(near.all()):
        return lerp(q1, q2, t.squeeze(-1) if t.ndim else t)
    safe_sin = torch.where(near, torch.ones_like(sin_theta), sin_theta)
    out = (torch.sin((1 - t) * theta) * q1 + torch.sin(t * theta) * q2) / safe_sin
    if bool(near.any()):
        fallback = (1 - t) * q1 + t * q2
        fallback = fallback / torch.linalg.vector_norm(fallback, dim=-1, keepdim=True)
        out = torch.where(near, fallback, out)
    return out


def interpolate(q1, q2, t, method: str = "slerp") -> torch.Tensor:
    if method == "slerp":
        return slerp(q1, q2, t)
    if method == "lerp":
        return lerp(q1, q2, t)
    raise InvalidArgumentError(f"unknown interpolation method {method!r}")


def make_generator_input(z, noise: NoiseSpec, rng: torch.Generator | None, mode: str = "concat"):
    """Build the generator input for code(s) ``z``.

    ``mode="concat"`` appends ``noise.noise_dim`` Gaussian coordinates of
    std ``noise.sigma``; the code block is passed through untouched.
    ``mode="additive"`` instead perturbs the code itself and re-projects it.
    ``rng=None`` means a zero noise draw (used for deterministic
    reconstructions).
    """
    z = _as_tensor(z)
    if mode == "concat":
        if noise.noise_dim == 0:
            return z
        shape = (*z.shape[:-1], noise.noise_dim)
        if rng is None or noise.sigma == 0:
            if rng is not None:
                torch.randn(shape, generator=rng)  # keep stream consumption stable
            eps = torch.zeros(shape, dtype=z.dtype)
        else:
            eps = torch.randn(shape, generator=rng, dtype=z.dtype) * noise.sigma
        return torch.cat([z, eps.to(z.device)], dim=-1)
    if mode == "additive":
        if rng is None or noise.sigma == 0:
            if rng is not None:
                torch.randn(z.shape, generator=rng)
            return z
        eps = torch.randn(z.shape, generator=rng, dtype=z.dtype).to(z.device) * noise.sigma
        return project_to_sphere(z + eps)
    raise InvalidArgumentError(f"unknown noise mode {mode!r}")


def generator_input_dim(latent_dim: int, noise: NoiseSpec, mode: str = "concat") -> int:
    return latent_dim + noise.noise_dim if mode == "concat" else latent_dim


@dataclass
class LatentCodebook:
    """Unit-norm codes, one per training example, with optional labels.

    ``codes`` is an ``(n, d)`` float32 tensor; ``labels`` an int64 array
    using :data:`UNLABELED` for examples without a class.
    """

    codes: torch.Tensor
    labels: np.ndarray
    seed: int | None = None
    class_index: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.codes.ndim != 2 or self.codes.shape[0] != len(self.labels):
            raise InvalidArgumentError("codes must be (n, d) with one label per row")
        self.class_index = {
            int(c): np.flatnonzero(self.labels == c)
            for c in np.unique(self.labels)
            if c != UNLABELED
        }

    def __len__(self):
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def code(self, i: int) -> torch.Tensor:
        if not 0 <= i < len(self):
            raise MissingCodeError(f"no code for index {i}")
        return self.codes[i]

    def max_norm_error(self) -> float:
        norms = torch.linalg.vector_norm(self.codes.detach().double(), dim=1)
        return float((norms - 1).abs().max()) if len(self) else 0.0

    def save(self, path) -> None:
        np.savez(
            path,
            codes=self.codes.detach().cpu().numpy().astype(np.float32),
            labels=self.labels.astype(np.int64),
            dim=np.int64(self.dim),
            seed=np.int64(-1 if self.seed is None else self.seed),
        )

    @classmethod
    def load(cls, path) -> "LatentCodebook":
        path = Path(path)
        with np.load(path) as data:
            codes = torch.from_numpy(data["codes"].astype(np.float32))
            if codes.shape[1] != int(data["dim"]):
                raise InvalidArgumentError("codebook dim field disagrees with codes array")
            seed = int(data["seed"])
            return cls(codes, data["labels"], None if seed < 0 else seed)


def _check_sizes(n: int, d: int) -> None:
    if n < 1 or d < 1:
        raise InvalidArgumentError(f"need n >= 1 and d >= 1, got n={n}, d={d}")


def init_random(n: int, d: int, seed: int, labels=None) -> LatentCodebook:
    _check_sizes(n, d)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n, d))
    codes = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = np.full(n, UNLABELED) if labels is None else np.asarray(labels)
    return LatentCodebook(torch.from_numpy(codes.astype(np.float32)), labels, seed)


def gray_vertex(k: int, d: int) -> np.ndarray:
    """The k-th hypercube vertex of {-1,+1}^d / sqrt(d) in Gray-code order."""
    g = k ^ (k >> 1)
    bits = np.array([(g >> b) & 1 for b in range(d)], dtype=np.float64)
    return (2 * bits - 1) / math.sqrt(d)


def init_hypercube(labels, d: int, jitter: float, seed: int) -> LatentCodebook:
    """Place every class near its own hypercube vertex.

    Classes are ranked by id and the rank-th Gray-code vertex is used.
    Unlabeled entries get isotropic random codes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    _check_sizes(len(labels), d)
    classes = [int(c) for c in np.unique(labels) if c != UNLABELED]
    if d < 64 and len(classes) > 2**d:
        raise CapacityError(f"{len(classes)} classes exceed the {2**d} vertices of a {d}-cube")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((len(labels), d))
    codes = raw.copy()
    for rank, c in enumerate(classes):
        members = labels == c
        codes[members] = gray_vertex(rank, d) + jitter * raw[members]
    codes /= np.linalg.norm(codes, axis=1, keepdims=True)
    return LatentCodebook(torch.from_numpy(codes.astype(np.float32)), labels, seed)


def init_from_features(features, labels, d: int, seed: int) -> LatentCodebook:
    """Initialize codes from per-example embeddings (e.g. a pretrained net's
    penultimate activations).  Embeddings of a different width are mapped
    to ``d`` dims with a seeded Gaussian random projection after centering.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_sizes(len(feats), d)
    if len(feats) != len(labels):
        raise InvalidArgumentError("one feature row per label required")
    feats = feats - feats.mean(axis=0, keepdims=True)
    if feats.shape[1] != d:
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((feats.shape[1], d)) / math.sqrt(d)
        feats = feats @ proj
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms < _ZERO_NORM):
        raise DegenerateInputError("an embedding row collapsed to zero")
    codes = feats / norms
    return LatentCodebook(torch.from_numpy(codes.astype(np.float32)), labels, seed)


def pick_class_partner(cb: LatentCodebook, i: int, rng: np.random.Generator) -> int:
    """A uniformly random other member of ``i``'s class (``i`` itself for
    singleton classes)."""
    if not 0 <= i < len(cb):
        raise MissingCodeError(f"no code for index {i}")
    label = int(cb.labels[i])
    if label == UNLABELED:
        raise InvalidArgumentError(f"index {i} is unlabeled and has no class partner")
    members = cb.class_index[label]
    others = members[members != i]
    if len(others) == 0:
        return int(i)
    return int(others[rng.integers(len(others))])
