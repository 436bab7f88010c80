"""Downstream classifier training, seed aggregation, FID and ablations."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngs
from .config import config_hash, to_dict
from .data import (
    DatasetManifest,
    SmallSampleSplit,
    load_dataset,
    load_split,
    make_split,
    standard_augment_batch,
)
from .errors import ConfigurationError, InsufficientDataError, NumericalError
from .generative_core import build_classifier
from .latent_space import NoiseSpec
from .sampler import AugmentationPolicy, Synthesizer
from .trainer import GlicoTrainer, TrainConfig, fit

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- configs


@dataclass(frozen=True)
class DownstreamConfig:
    arch: str = "small-cnn-4conv"
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    width: int = 32
    standard_augment: bool = True
    high_res: bool = False
    seed: int = 0
    eval_batch_size: int = 256


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "digits32"
    test_dataset: str | None = None
    spc: int = 10
    split_seed: int = 0
    split_file: str | None = None


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs, resolvable from a single master seed."""

    data: DataConfig = DataConfig()
    glico: TrainConfig = TrainConfig()
    augment: AugmentationPolicy = AugmentationPolicy()
    classifier: DownstreamConfig = DownstreamConfig()
    use_glico: bool = True
    seed: int = 0
    output_dir: str | None = None
    device: str = "auto"

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            glico=dataclasses.replace(self.glico, seed=rngs.int_seed(seed, "glico") % 2**31),
            classifier=dataclasses.replace(self.classifier, seed=rngs.int_seed(seed, "downstream") % 2**31),
        )


def resolve_device(name: str) -> str:
    if name == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    return name


# ------------------------------------------------------------------- results


@dataclass
class RunResult:
    top1: float
    top5: float
    seed: int
    config_hash: str
    wall_time: float
    variant: str = "glico"
    split_checksum: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.top1 <= self.top5 <= 100:
            raise NumericalError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def append_result(path, record: dict) -> None:
    """Append one JSON line with a single write (atomic under O_APPEND)."""
    line = (json.dumps(record, sort_keys=True) + "\n").encode()
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, line)
    finally:
        os.close(fd)


def read_results(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def mean_ste(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise InsufficientDataError("standard error needs at least 2 runs")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def aggregate_seeds(results) -> dict[str, tuple[float, float]]:
    """Mean and standard error per metric over seeds."""
    results = list(results)
    if len(results) < 2:
        raise InsufficientDataError("aggregation needs at least 2 runs")
    if not isinstance(results[0], RunResult):
        return {"value": mean_ste(results)}
    return {m: mean_ste([getattr(r, m) for r in results]) for m in ("top1", "top5")}


# ------------------------------------------------------------ classification


def topk_accuracy(logits: torch.Tensor, y: torch.Tensor, ks=(1, 5)) -> list[float]:
    maxk = min(max(ks), logits.shape[1])
    pred = logits.topk(maxk, dim=1).indices
    hits = pred == y[:, None]
    return [100.0 * float(hits[:, :min(k, maxk)].any(1).float().mean()) for k in ks]


def evaluate_classifier(model, images: torch.Tensor, labels, batch_size: int = 256, device="cpu") -> tuple[float, float]:
    model.eval()
    y = torch.as_tensor(labels)
    logits = []
    with torch.no_grad():
        for b in images.split(batch_size):
            logits.append(model(b.to(device)).cpu())
    top1, top5 = topk_accuracy(torch.cat(logits), y)
    return top1, top5


def train_downstream(train_x, train_y, test_x, test_y, config: DownstreamConfig, num_classes: int, *,
                     policy: AugmentationPolicy | None = None, synthesizer: Synthesizer | None = None,
                     device="cpu"):
    """Train a classifier on (train_x, train_y); return (model, top1, top5).

    With a policy, every mini-batch goes through ``augment_batch`` before
    standard augmentation.  Data order, coin flips, synthesis draws and
    flip/crop draws use separate streams, so baseline and augmented runs
    see the same real batches.
    """
    if policy is not None and synthesizer is None:
        raise ConfigurationError("an augmentation policy needs a trained GLICO state")
    seed = config.seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rngs.int_seed(seed, "downstream_init"))
        kwargs = {"width": config.width, "in_channels": train_x.shape[1]} if config.arch == "small-cnn-4conv" else {}
        model = build_classifier(config.arch, num_classes, **kwargs).to(device)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay, nesterov=config.momentum > 0)
    n = len(train_x)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, config.epochs * steps_per_epoch))
    coin_rng = rngs.numpy_stream(seed, "replace_coins")
    draw_rng = rngs.numpy_stream(seed, "synth_draws")
    aug_rng = rngs.numpy_stream(seed, "standard_augment")
    train_y = torch.as_tensor(train_y)
    for epoch in range(config.epochs):
        order = rngs.numpy_stream(seed, "downstream_order", epoch).permutation(n)
        model.train()
        for s in range(0, n, config.batch_size):
            b = order[s:s + config.batch_size]
            x, y = train_x[b], train_y[b]
            if policy is not None:
                x = synthesizer.augment_batch(x, y, b, policy, coin_rng, draw_rng).images
            if config.standard_augment:
                x = standard_augment_batch(x, aug_rng, high_res=config.high_res)
            loss = F.cross_entropy(model(x.to(device)), y.to(device))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    top1, top5 = evaluate_classifier(model, test_x, test_y, config.eval_batch_size, device)
    return model, top1, top5


def train_downstream_classifier(split: SmallSampleSplit, train_manifest: DatasetManifest,
                                test_manifest: DatasetManifest, arch_id: str | None,
                                policy: AugmentationPolicy | None, glico_state: GlicoTrainer | None,
                                config: DownstreamConfig, device="cpu", variant: str | None = None):
    """Protocol wrapper: split images in, held-out accuracy out.

    Codebook index k of ``glico_state`` must correspond to
    ``split.train_indices[k]``; a recorded split checksum is enforced.
    """
    if policy is not None and glico_state is None:
        raise ConfigurationError("GLICO augmentation requested without a trained GLICO state")
    if glico_state is not None:
        bound = glico_state.meta.get("split_checksum")
        if bound is not None and bound != split.checksum:
            raise ConfigurationError("GLICO state was trained on a different split")
        if glico_state.n_labeled != len(split.train_indices):
            raise ConfigurationError("GLICO codebook size differs from the split size")
    if arch_id is not None:
        config = dataclasses.replace(config, arch=arch_id)
    t0 = time.time()
    model, top1, top5 = train_downstream(
        train_manifest.tensor(split.train_indices), train_manifest.subset_labels(split.train_indices),
        test_manifest.tensor(), test_manifest.labels, config, train_manifest.num_classes,
        policy=policy, synthesizer=None if glico_state is None or policy is None else Synthesizer(glico_state),
        device=device,
    )
    result = RunResult(top1, top5, config.seed, config_hash(config), time.time() - t0,
                       variant or ("glico" if policy is not None else "baseline"), split.checksum)
    return result, model


# ----------------------------------------------------------------------- FID


@dataclass
class FIDReport:
    score: float
    feature_source: str
    n_real: int
    n_generated: int


def _canonical_rows(f: np.ndarray) -> np.ndarray:
    # sorted rows make the statistics bitwise independent of sample order
    return f[np.lexsort(f.T[::-1])]


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with S = sigma + eps*I.

    The trace of the matrix square root is computed as the sum of square
    roots of the (clipped) eigenvalues of sqrt(S1) S2 sqrt(S1), which is
    symmetric PSD and similar to S1 S2.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1 = np.atleast_2d(sigma1).astype(np.float64) + eps * np.eye(len(mu1))
    s2 = np.atleast_2d(sigma2).astype(np.float64) + eps * np.eye(len(mu2))
    r1 = _sqrt_psd(s1)
    inner = r1 @ s2 @ r1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)
    if not math.isfinite(d):
        raise NumericalError("Frechet distance is not finite")
    return max(d, 0.0)


def feature_stats(features) -> tuple[np.ndarray, np.ndarray]:
    f = _canonical_rows(np.asarray(features, dtype=np.float64))
    if len(f) < 2:
        raise InsufficientDataError("FID needs at least 2 samples per set")
    return f.mean(axis=0), np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])


def fid_from_features(real, generated, feature_source: str = "features") -> FIDReport:
    mu1, s1 = feature_stats(real)
    mu2, s2 = feature_stats(generated)
    return FIDReport(frechet_distance(mu1, s1, mu2, s2), feature_source, len(real), len(generated))


def fid_score(real_images: torch.Tensor, generated_images: torch.Tensor, feature_fn: Callable,
              feature_source: str = "extractor-pooled", batch_size: int = 64) -> FIDReport:
    """FID between two image sets featurized by the same ``feature_fn``."""
    def featurize(x):
        with torch.no_grad():
            return torch.cat([feature_fn(b) for b in x.split(batch_size)]).double().cpu().numpy()

    return fid_from_features(featurize(real_images), featurize(generated_images), feature_source)


# ------------------------------------------------------------------ ablations


def _no_noise(c: RunConfig) -> RunConfig:
    sigma = c.glico.noise.sigma
    return dataclasses.replace(c, glico=dataclasses.replace(c.glico, noise=NoiseSpec(0, sigma)),
                               augment=dataclasses.replace(c.augment, noise=None))


def _glico(c: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(c, glico=dataclasses.replace(c.glico, **changes))


VARIANTS: dict[str, Callable[[RunConfig], RunConfig]] = {
    "baseline": lambda c: dataclasses.replace(c, use_glico=False),
    "glico": lambda c: dataclasses.replace(c, use_glico=True),
    "no-classifier": lambda c: _glico(c, gamma=0.0),
    "no-noise": _no_noise,
    "lerp": lambda c: dataclasses.replace(c, augment=dataclasses.replace(c.augment, interp="lerp")),
    "transductive": lambda c: _glico(c, transductive=True),
    "hypercube-init": lambda c: _glico(c, init="hypercube"),
    "embedding-init": lambda c: _glico(c, init="embedding"),
    "additive-noise": lambda c: _glico(c, noise_mode="additive"),
    "latent-classifier": lambda c: _glico(c, loss_variant="latent-classifier"),
    "cosine-loss": lambda c: _glico(c, loss_variant="cosine"),
}


def variant_config(base: RunConfig, variant: str) -> RunConfig:
    try:
        return VARIANTS[variant](base)
    except KeyError:
        raise ConfigurationError(f"unknown variant {variant!r}; known: {', '.join(VARIANTS)}") from None


def load_experiment_data(config: RunConfig):
    """(train manifest, test manifest, split) for a run config."""
    d = config.data
    train = load_dataset(d.dataset, "train")
    if d.test_dataset is not None:
        test = load_dataset(d.test_dataset, "test")
    elif d.dataset in ("digits32",):
        test = load_dataset(d.dataset, "test")
    else:
        raise ConfigurationError("data.test_dataset is required for non-builtin datasets")
    split = load_split(d.split_file, train) if d.split_file else make_split(train, d.spc, d.split_seed)
    return train, test, split


def train_glico_for_split(config: RunConfig, train: DatasetManifest, test: DatasetManifest,
                          split: SmallSampleSplit, device="cpu", checkpoint_dir=None,
                          unlabeled: DatasetManifest | None = None, progress=None) -> GlicoTrainer:
    """Fit GLICO on the split; the transductive pass defaults to the test images."""
    g = dataclasses.replace(config.glico, image_size=train.resolution[0], num_classes=train.num_classes)
    unlabeled = (unlabeled or test).tensor() if g.transductive else None
    trainer = GlicoTrainer(g, train.tensor(split.train_indices), train.subset_labels(split.train_indices),
                           unlabeled, device=device)
    trainer.meta.update({"split_checksum": split.checksum, "dataset_id": split.dataset_id,
                         "dataset_hash": train.content_hash(), "extractor": trainer.extractor.weights_source})
    return fit(g, trainer.x_labeled, trainer.y_labeled, unlabeled, trainer=trainer,
               checkpoint_dir=checkpoint_dir, progress=progress)


def run_experiment(config: RunConfig, variant: str = "glico", seed: int | None = None) -> RunResult:
    """One (variant, seed) cell: optional GLICO training, then the classifier."""
    cfg = variant_config(config, variant)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    device = resolve_device(cfg.device)
    train, test, split = load_experiment_data(cfg)
    t0 = time.time()
    state = train_glico_for_split(cfg, train, test, split, device) if cfg.use_glico else None
    result, _ = train_downstream_classifier(split, train, test, None, cfg.augment if state else None, state,
                                            cfg.classifier, device=device, variant=variant)
    result.seed = cfg.seed
    result.config_hash = config_hash(cfg)
    result.wall_time = time.time() - t0
    result.meta = {"gamma": cfg.glico.gamma, "noise_dim": cfg.glico.noise.noise_dim,
                   "interp": cfg.augment.interp, "transductive": cfg.glico.transductive,
                   "init": cfg.glico.init, "noise_mode": cfg.glico.noise_mode,
                   "loss_variant": cfg.glico.loss_variant, "use_glico": cfg.use_glico,
                   "spc": split.spc, "split_seed": split.seed}
    return result


@dataclass
class AblationTable:
    rows: list[dict]
    results: list[RunResult]

    def format(self) -> str:
        head = f"{'variant':<18} {'runs':>4} {'top1':>16} {'top5':>16}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            t1 = f"{r['top1_mean']:.2f}" + (f" +- {r['top1_ste']:.2f}" if r["top1_ste"] is not None else "")
            t5 = f"{r['top5_mean']:.2f}" + (f" +- {r['top5_ste']:.2f}" if r["top5_ste"] is not None else "")
            lines.append(f"{r['variant']:<18} {r['runs']:>4} {t1:>16} {t5:>16}")
        return "\n".join(lines)


def build_table(results: list[RunResult], order: list[str]) -> AblationTable:
    checksums = {r.split_checksum for r in results}
    if len(checksums) > 1:
        raise ConfigurationError("refusing to tabulate runs made on different splits")
    rows = []
    for v in order:
        rs = [r for r in results if r.variant == v]
        row = {"variant": v, "runs": len(rs), "seeds": [r.seed for r in rs]}
        for m in ("top1", "top5"):
            vals = [getattr(r, m) for r in rs]
            if len(vals) >= 2:
                row[f"{m}_mean"], row[f"{m}_ste"] = mean_ste(vals)
            else:
                row[f"{m}_mean"], row[f"{m}_ste"] = float(np.mean(vals)), None
        rows.append(row)
    return AblationTable(rows, results)


def _run_cell(args):
    config, variant, seed = args
    return run_experiment(config, variant, seed)


def ablation_runner(base: RunConfig, variants, seeds=(0, 1, 2), jobs: int = 1,
                    results_path=None, runner: Callable = run_experiment) -> AblationTable:
    """Run every variant under the same seeds and split; tabulate mean +- STE.

    An empty variant list runs the baseline alone.
    """
    variants = list(variants) or ["baseline"]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigurationError(f"unknown variant {v!r}; known: {', '.join(VARIANTS)}")
    cells = [(base, v, s) for v in variants for s in seeds]
    if jobs > 1 and runner is run_experiment:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [runner(c, v, s) for c, v, s in cells]
    if results_path is not None:
        for r in results:
            append_result(results_path, r.as_dict())
    return build_table(results, variants)


def plot_accuracy_curves(records: list[dict], path) -> None:
    """Top-1 vs samples-per-class, one line per variant (mean +- STE)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for v in sorted({r["variant"] for r in records}):
        pts = {}
        for r in records:
            if r["variant"] == v:
                pts.setdefault(r["meta"].get("spc"), []).append(r["top1"])
        xs = sorted(k for k in pts if k is not None)
        means = [np.mean(pts[x]) for x in xs]
        errs = [mean_ste(pts[x])[1] if len(pts[x]) > 1 else 0 for x in xs]
        ax.errorbar(xs, means, yerr=errs, marker="o", capsize=3, label=v)
    ax.set_xlabel("samples per class")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_run_outputs(out_dir, config: RunConfig, extra_hashes: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n")
    if extra_hashes:
        (out / "input_hashes.json").write_text(json.dumps(extra_hashes, indent=2, sort_keys=True) + "\n")
    return out
