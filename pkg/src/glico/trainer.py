"""Joint optimization of per-example codes, generator and weak classifier.

Labeled examples are trained with reconstruction + classification loss,
unlabeled ones (transductive mode) with reconstruction only.  Every code
touched by a step is projected back onto the unit sphere right after the
optimizer update.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngs
from .config import from_dict, to_dict
from .errors import (
    ConfigurationError,
    IntegrityError,
    InvalidArgumentError,
    MissingCodeError,
    ModeError,
)
from .generative_core import (
    ExtractorConfig,
    FeatureExtractor,
    Generator,
    LatentClassifier,
    LossSpec,
    build_classifier,
    combined_loss,
)
from .latent_space import (
    UNLABELED,
    LatentCodebook,
    NoiseSpec,
    generator_input_dim,
    init_from_features,
    init_hypercube,
    init_random,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GLICOCKPT1\n"
INIT_METHODS = ("random", "hypercube", "embedding")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    gamma: float = 1.0
    code_lr: float = 1e-2
    gen_lr: float = 1e-3
    cls_lr: float = 1e-3
    optimizer_id: str = "adam"
    batch_size: int = 128
    noise: NoiseSpec = NoiseSpec()
    noise_mode: str = "concat"
    oversample_factor: int = 1
    transductive: bool = False
    seed: int = 0
    latent_dim: int = 128
    image_size: int = 32
    init: str = "random"
    hypercube_jitter: float = 0.1
    loss_variant: str = "standard"
    layer_weights: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    classifier_arch: str = "small-cnn-4conv"
    classifier_width: int = 32
    attach_classifier: bool = True
    generator_width: int = 64
    extractor: ExtractorConfig = ExtractorConfig()
    num_classes: int | None = None
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        for name in ("code_lr", "gen_lr", "cls_lr"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and latent_dim >= 1 required")
        if self.oversample_factor < 1:
            raise ConfigurationError("oversample_factor must be >= 1")
        if self.optimizer_id not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer_id!r}")
        if self.noise_mode not in ("concat", "additive"):
            raise ConfigurationError(f"unknown noise mode {self.noise_mode!r}")
        if self.init not in INIT_METHODS:
            raise ConfigurationError(f"unknown init {self.init!r}; choose from {INIT_METHODS}")

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec(layer_weights=tuple(self.layer_weights), gamma=self.gamma, variant=self.loss_variant)


def default_oversample_factor(spc: int, full_spc: int) -> int:
    """Inner repetitions per epoch so every epoch sees about as many examples
    as one pass over the full dataset (e.g. 50 of 500 per class -> 10)."""
    if spc < 1 or full_spc < 1:
        raise InvalidArgumentError("sample counts must be positive")
    return max(1, int(round(full_spc / spc)))


@contextlib.contextmanager
def _seeded(seed: int, name: str):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rngs.int_seed(seed, name))
        yield


def _as_images(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dtype == torch.uint8:
        x = x.float() / 127.5 - 1
    return x.float()


class GlicoTrainer:
    """Owns the full training state: codebook, networks, optimizers, rng."""

    def __init__(self, config: TrainConfig, labeled_images, labels, unlabeled_images=None,
                 init_features=None, device="cpu"):
        self.config = config
        self.device = torch.device(device)
        if config.deterministic:
            rngs.set_deterministic(True)
        self.x_labeled = _as_images(labeled_images).to(self.device)
        self.y_labeled = torch.as_tensor(np.asarray(labels), dtype=torch.long).to(self.device)
        if len(self.x_labeled) != len(self.y_labeled):
            raise ConfigurationError("labeled images and labels differ in length")
        if unlabeled_images is None:
            self.x_unlabeled = self.x_labeled.new_zeros((0, *self.x_labeled.shape[1:]))
        else:
            self.x_unlabeled = _as_images(unlabeled_images).to(self.device)
        self.n_labeled = len(self.x_labeled)
        n = self.n_labeled + len(self.x_unlabeled)
        if n == 0:
            raise ConfigurationError("no training images")
        self.num_classes = config.num_classes or int(self.y_labeled.max()) + 1
        self.spec = config.loss_spec
        self.meta: dict = {}

        all_labels = np.concatenate([self.y_labeled.cpu().numpy(),
                                     np.full(len(self.x_unlabeled), UNLABELED)])
        self.extractor = FeatureExtractor(config.extractor).to(self.device)
        self.codebook = self._init_codebook(all_labels, init_features)
        self.codes = torch.nn.Parameter(self.codebook.codes.to(self.device))
        self.codebook.codes = self.codes.data

        in_dim = generator_input_dim(config.latent_dim, config.noise, config.noise_mode)
        with _seeded(config.seed, "generator_init"):
            self.generator = Generator(in_dim, config.image_size, self.x_labeled.shape[1],
                                       config.generator_width).to(self.device)
        self.classifier = None
        if config.attach_classifier:
            with _seeded(config.seed, "classifier_init"):
                if config.loss_variant == "latent-classifier":
                    self.classifier = LatentClassifier(config.latent_dim, self.num_classes)
                else:
                    kwargs = {}
                    if config.classifier_arch == "small-cnn-4conv":
                        kwargs = {"width": config.classifier_width, "in_channels": self.x_labeled.shape[1]}
                    self.classifier = build_classifier(config.classifier_arch, self.num_classes, **kwargs)
                self.classifier.to(self.device)
        self._build_optimizers()
        self.noise_rng = rngs.torch_stream(config.seed, "glico_noise")
        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []
        self.ce_evaluations = 0

    # ------------------------------------------------------------ setup

    def _init_codebook(self, labels, init_features) -> LatentCodebook:
        cfg = self.config
        seed = rngs.int_seed(cfg.seed, "codebook_init") % (2**31)
        if cfg.init == "random":
            return init_random(len(labels), cfg.latent_dim, seed, labels)
        if cfg.init == "hypercube":
            return init_hypercube(labels, cfg.latent_dim, cfg.hypercube_jitter, seed)
        if init_features is None:
            with torch.no_grad():
                x = torch.cat([self.x_labeled, self.x_unlabeled])
                init_features = torch.cat([self.extractor.pooled_features(b) for b in x.split(64)]).cpu().numpy()
        return init_from_features(init_features, labels, cfg.latent_dim, seed)

    def _build_optimizers(self):
        cfg = self.config
        if cfg.optimizer_id == "adam":
            self.code_opt = torch.optim.SparseAdam([self.codes], lr=cfg.code_lr)
            self.gen_opt = torch.optim.Adam(self.generator.parameters(), lr=cfg.gen_lr, betas=(0.5, 0.999))
            self.cls_opt = (torch.optim.Adam(self.classifier.parameters(), lr=cfg.cls_lr)
                            if self.classifier is not None else None)
        else:
            self.code_opt = torch.optim.SGD([self.codes], lr=cfg.code_lr)
            self.gen_opt = torch.optim.SGD(self.generator.parameters(), lr=cfg.gen_lr)
            self.cls_opt = (torch.optim.SGD(self.classifier.parameters(), lr=cfg.cls_lr)
                            if self.classifier is not None else None)

    # ------------------------------------------------------------ steps

    def _check_indices(self, idx: torch.Tensor, labeled: bool):
        if len(idx) and (int(idx.min()) < 0 or int(idx.max()) >= len(self.codebook)):
            raise MissingCodeError(f"batch references indices without a code: {idx.tolist()}")
        is_labeled = torch.as_tensor(self.codebook.labels != UNLABELED)[idx.cpu()]
        if labeled and not bool(is_labeled.all()):
            raise InvalidArgumentError("labeled step given unlabeled indices")

    def _step(self, x, y, idx, split: str) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long, device=self.device)
        self._check_indices(idx, labeled=y is not None)
        self.generator.train()
        if self.classifier is not None:
            self.classifier.train()
        z = F.embedding(idx, self.codes, sparse=True)
        out = combined_loss(
            _as_images(x).to(self.device), z, y, self.generator,
            self.classifier if y is not None else None, self.extractor, self.spec,
            noise=self.config.noise, rng=self.noise_rng, noise_mode=self.config.noise_mode,
        )
        self.code_opt.zero_grad()
        self.gen_opt.zero_grad()
        if self.cls_opt is not None:
            self.cls_opt.zero_grad()
        out.total.backward()
        self.code_opt.step()
        self.gen_opt.step()
        if out.ce is not None:
            self.cls_opt.step()
        with torch.no_grad():
            touched = torch.unique(idx)
            rows = self.codes[touched]
            self.codes[touched] = rows / torch.linalg.vector_norm(rows, dim=1, keepdim=True)
        self.ce_evaluations += out.ce_count
        record = {
            "epoch": self.epoch,
            "step": self.step,
            "split": split,
            "percep": out.percep,
            "ce": out.ce,
            "total": float(out.total.detach()),
        }
        self.step += 1
        self.history.append(record)
        return record

    def train_step_labeled(self, x, y, idx) -> dict:
        y = torch.as_tensor(y, dtype=torch.long, device=self.device)
        return self._step(x, y, idx, "labeled")

    def train_step_unlabeled(self, x, idx) -> dict:
        if not self.config.transductive:
            raise ModeError("unlabeled steps require transductive mode")
        return self._step(x, None, idx, "unlabeled")

    def run_epoch(self) -> None:
        cfg = self.config
        bs = cfg.batch_size
        for rep in range(cfg.oversample_factor):
            order = rngs.numpy_stream(cfg.seed, "glico_order", self.epoch, rep, 0).permutation(self.n_labeled)
            for s in range(0, self.n_labeled, bs):
                b = torch.as_tensor(order[s:s + bs], device=self.device)
                self.train_step_labeled(self.x_labeled[b], self.y_labeled[b], b)
        n_u = len(self.x_unlabeled)
        if cfg.transductive and n_u:
            for rep in range(cfg.oversample_factor):
                order = rngs.numpy_stream(cfg.seed, "glico_order", self.epoch, rep, 1).permutation(n_u)
                for s in range(0, n_u, bs):
                    b = torch.as_tensor(order[s:s + bs], device=self.device)
                    self.train_step_unlabeled(self.x_unlabeled[b], b + self.n_labeled)
        self.epoch += 1

    # ------------------------------------------------------------ sampling helpers

    def eval_generator(self):
        self.generator.eval()
        return self.generator

    def write_history(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec) + "\n")

    # ------------------------------------------------------------ checkpoints

    def state_payload(self) -> dict:
        cfg = to_dict(self.config)
        return {
            "config": json.dumps(cfg),
            "codes": self.codes.detach().cpu().clone(),
            "labels": torch.from_numpy(self.codebook.labels.copy()),
            "codebook_seed": -1 if self.codebook.seed is None else int(self.codebook.seed),
            "n_labeled": self.n_labeled,
            "num_classes": self.num_classes,
            "generator": self.generator.state_dict(),
            "classifier": None if self.classifier is None else self.classifier.state_dict(),
            "code_opt": self.code_opt.state_dict(),
            "gen_opt": self.gen_opt.state_dict(),
            "cls_opt": None if self.cls_opt is None else self.cls_opt.state_dict(),
            "noise_rng": self.noise_rng.get_state(),
            "epoch": self.epoch,
            "step": self.step,
            "ce_evaluations": self.ce_evaluations,
            "history": json.dumps(self.history),
            "loss_spec": json.dumps(to_dict(self.spec)),
            "extractor_identity": self.extractor.identity,
            "extractor_source": self.extractor.weights_source,
            "meta": json.dumps(self.meta),
        }

    def save_checkpoint(self, path) -> None:
        save_checkpoint(self, path)


def save_checkpoint(trainer: GlicoTrainer, path) -> None:
    buf = io.BytesIO()
    torch.save(trainer.state_payload(), buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).hexdigest().encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + digest + b"\n" + payload)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    """Verify and decode a checkpoint archive into its payload dict."""
    raw = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 65
    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < head:
        raise IntegrityError(f"{path} is not a GLICO checkpoint")
    digest, payload = raw[len(CHECKPOINT_MAGIC):head - 1], raw[head:]
    if hashlib.sha256(payload).hexdigest().encode() != digest:
        raise IntegrityError(f"{path} failed its content hash check (truncated or corrupt)")
    return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)


def load_checkpoint(path, labeled_images=None, labels=None, unlabeled_images=None, device="cpu") -> GlicoTrainer:
    """Restore a trainer.  Data may be omitted when only sampling is needed."""
    p = read_checkpoint(path)
    config = from_dict(TrainConfig, json.loads(p["config"]))
    n_labeled = int(p["n_labeled"])
    n_total = p["codes"].shape[0]
    shape = (3, config.image_size, config.image_size)
    if labeled_images is None:
        labeled_images = torch.zeros((n_labeled, *shape))
        labels = p["labels"][:n_labeled].numpy()
    if unlabeled_images is None and n_total > n_labeled:
        unlabeled_images = torch.zeros((n_total - n_labeled, *labeled_images.shape[1:]))
    if len(labeled_images) != n_labeled or n_total != n_labeled + (0 if unlabeled_images is None else len(unlabeled_images)):
        raise ConfigurationError("data sizes disagree with the checkpoint's codebook")
    # codes are overwritten below, so skip the (possibly expensive) original init
    trainer = GlicoTrainer(dataclasses.replace(config, init="random"), labeled_images, labels,
                           unlabeled_images, device=device)
    trainer.config = config
    if trainer.extractor.identity != p["extractor_identity"]:
        raise IntegrityError("feature extractor differs from the one used for training")
    with torch.no_grad():
        trainer.codes.copy_(p["codes"])
    trainer.codebook = LatentCodebook(trainer.codes.data, p["labels"].numpy(),
                                      None if p["codebook_seed"] < 0 else int(p["codebook_seed"]))
    trainer.num_classes = int(p["num_classes"])
    trainer.generator.load_state_dict(p["generator"])
    if p["classifier"] is not None:
        trainer.classifier.load_state_dict(p["classifier"])
        trainer.cls_opt.load_state_dict(p["cls_opt"])
    trainer.code_opt.load_state_dict(p["code_opt"])
    trainer.gen_opt.load_state_dict(p["gen_opt"])
    trainer.noise_rng.set_state(p["noise_rng"])
    trainer.epoch = int(p["epoch"])
    trainer.step = int(p["step"])
    trainer.ce_evaluations = int(p["ce_evaluations"])
    trainer.history = json.loads(p["history"])
    trainer.meta = json.loads(p["meta"])
    return trainer


def fit(config: TrainConfig, labeled_images, labels, unlabeled_images=None, *, trainer: GlicoTrainer | None = None,
        checkpoint_dir=None, init_features=None, device="cpu", progress=None) -> GlicoTrainer:
    """Run epochs until ``config.epochs``; resumes ``trainer`` when given."""
    if trainer is None:
        trainer = GlicoTrainer(config, labeled_images, labels, unlabeled_images, init_features, device)
    else:
        n = len(labeled_images) + (0 if unlabeled_images is None else len(unlabeled_images))
        if n != len(trainer.codebook):
            raise ConfigurationError(f"{n} images given but the codebook holds {len(trainer.codebook)} codes")
    while trainer.epoch < config.epochs:
        trainer.run_epoch()
        if progress is not None:
            progress(trainer)
        if checkpoint_dir and config.checkpoint_every and trainer.epoch % config.checkpoint_every == 0:
            save_checkpoint(trainer, Path(checkpoint_dir) / f"epoch_{trainer.epoch:04d}.ckpt")
    return trainer
