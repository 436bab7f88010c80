"""Class-conditional synthesis from a trained codebook and generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegeneratePairError, InvalidArgumentError, MissingCodeError
from .latent_space import (
    UNLABELED,
    NoiseSpec,
    interpolate,
    make_generator_input,
    pick_class_partner,
)

log = logging.getLogger(__name__)

MAX_PARTNER_RETRIES = 5


@dataclass(frozen=True)
class AugmentationPolicy:
    """How real mini-batch slots get swapped for synthetic images.

    ``noise=None`` reuses the noise settings the generator was trained with.
    ``allow_endpoints`` admits t in {0, 1}; only meant for tests.
    """

    replace_prob: float = 0.5
    t_set: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4)
    interp: str = "slerp"
    noise: NoiseSpec | None = None
    allow_endpoints: bool = False

    def __post_init__(self):
        if not 0 <= self.replace_prob <= 1:
            raise InvalidArgumentError("replace_prob must lie in [0, 1]")
        if not self.t_set:
            raise InvalidArgumentError("t_set must not be empty")
        lo_ok = (lambda t: 0 <= t <= 1) if self.allow_endpoints else (lambda t: 0 < t < 1)
        if not all(lo_ok(t) for t in self.t_set):
            raise InvalidArgumentError(f"interpolation factors {self.t_set} outside the allowed range")
        if self.interp not in ("slerp", "lerp"):
            raise InvalidArgumentError(f"unknown interpolation {self.interp!r}")


@dataclass(frozen=True)
class Provenance:
    source: int
    partner: int
    t: float
    noise_seed: int
    label: int

    def as_dict(self) -> dict:
        return {"source": self.source, "partner": self.partner, "t": self.t,
                "seed": self.noise_seed, "label": self.label}


@dataclass
class AugmentedBatch:
    images: torch.Tensor
    labels: torch.Tensor
    replaced: np.ndarray
    provenance: list[Provenance]

    def __len__(self):
        return len(self.labels)


class Synthesizer:
    """Read-only view of a trained state for sampling.

    Accepts anything exposing ``codebook``, ``generator`` and ``config``
    (noise spec / mode), i.e. a :class:`~glico.trainer.GlicoTrainer`.
    """

    def __init__(self, state):
        self.codebook = state.codebook
        self.generator = state.generator
        self.noise = state.config.noise
        self.noise_mode = state.config.noise_mode
        self.device = next(self.generator.parameters()).device

    # -------------------------------------------------------------- core

    def _generate(self, codes: torch.Tensor, seeds: list[int | None], noise: NoiseSpec) -> torch.Tensor:
        inputs = []
        for z, s in zip(codes, seeds):
            g = None if s is None else torch.Generator().manual_seed(s)
            inputs.append(make_generator_input(z, noise, g, self.noise_mode))
        self.generator.eval()
        with torch.no_grad():
            out = self.generator(torch.stack(inputs).to(self.device).float())
        return out.cpu()

    def _check(self, i: int):
        if not 0 <= i < len(self.codebook):
            raise MissingCodeError(f"no code for index {i}")

    def _draw(self, i: int, policy: AugmentationPolicy, rng: np.random.Generator):
        """Pick (partner, t, interpolated code) for source ``i``."""
        self._check(i)
        if self.codebook.labels[i] == UNLABELED:
            raise InvalidArgumentError(f"index {i} is unlabeled")
        zi = self.codebook.codes[i].detach().double().cpu()
        t = float(policy.t_set[rng.integers(len(policy.t_set))])
        for _ in range(MAX_PARTNER_RETRIES):
            j = pick_class_partner(self.codebook, i, rng)
            zj = self.codebook.codes[j].detach().double().cpu()
            try:
                return j, t, interpolate(zi, zj, t, policy.interp)
            except DegeneratePairError:
                continue
        log.warning("no usable partner for %d after %d tries; reconstructing", i, MAX_PARTNER_RETRIES)
        return i, 0.0, zi

    def sample_many(self, indices, policy: AugmentationPolicy, rng: np.random.Generator):
        noise = policy.noise or self.noise
        codes, seeds, prov = [], [], []
        for i in indices:
            i = int(i)
            j, t, z = self._draw(i, policy, rng)
            seed = int(rng.integers(2**63 - 1))
            codes.append(z)
            seeds.append(seed)
            prov.append(Provenance(i, j, t, seed, int(self.codebook.labels[i])))
        if not codes:
            return torch.zeros((0, *self.generator.output_shape)), prov
        return self._generate(torch.stack(codes), seeds, noise), prov

    def sample_synthetic(self, i: int, policy: AugmentationPolicy, rng: np.random.Generator):
        images, prov = self.sample_many([i], policy, rng)
        return images[0], prov[0]

    def augment_batch(self, x: torch.Tensor, y, idx, policy: AugmentationPolicy,
                      rng: np.random.Generator, sample_rng: np.random.Generator | None = None) -> AugmentedBatch:
        """Replace each slot independently with probability ``replace_prob``.

        Coin flips come from ``rng``; partner/t/noise draws from
        ``sample_rng`` (defaults to ``rng``).
        """
        sample_rng = rng if sample_rng is None else sample_rng
        idx = np.asarray(idx)
        y = torch.as_tensor(y)
        replaced = rng.random(len(idx)) < policy.replace_prob
        out = x.clone()
        prov: list[Provenance] = []
        if replaced.any():
            imgs, prov = self.sample_many(idx[replaced], policy, sample_rng)
            out[torch.from_numpy(replaced)] = imgs.to(out.dtype).to(out.device)
        return AugmentedBatch(out, y.clone(), replaced, prov)

    def reconstruct(self, i: int) -> torch.Tensor:
        return self.reconstruct_many([i])[0]

    def reconstruct_many(self, indices) -> torch.Tensor:
        for i in indices:
            self._check(int(i))
        codes = self.codebook.codes[torch.as_tensor(list(indices), dtype=torch.long)].detach().cpu()
        return self._generate(codes, [None] * len(codes), self.noise)

    def interpolation_strip(self, i: int, j: int, steps: int, interp: str = "slerp") -> torch.Tensor:
        """``steps`` interior frames between the reconstructions of i and j."""
        self._check(i)
        self._check(j)
        zi = self.codebook.codes[i].detach().double().cpu()
        zj = self.codebook.codes[j].detach().double().cpu()
        ts = np.linspace(0.0, 1.0, steps + 2)
        ts[0], ts[-1] = 0.0, 1.0
        codes = [zi] + [interpolate(zi, zj, float(t), interp) for t in ts[1:-1]] + [zj]
        return self._generate(torch.stack(codes), [None] * len(codes), self.noise)

    def random_latent_samples(self, n: int, rng: np.random.Generator) -> torch.Tensor:
        """Images from uniformly random unit codes (quality reference only)."""
        raw = torch.from_numpy(rng.standard_normal((n, self.codebook.dim)))
        codes = raw / torch.linalg.vector_norm(raw, dim=1, keepdim=True)
        seeds = [int(rng.integers(2**63 - 1)) for _ in range(n)]
        return self._generate(codes, seeds, self.noise)
