"""Generator, auxiliary classifiers, frozen perceptual extractor and losses."""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    InvalidArgumentError,
    ShapeError,
)
from .latent_space import UNLABELED, NoiseSpec, make_generator_input

log = logging.getLogger(__name__)

TAP_LAYERS = ("conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2")
CLASSIFIER_ARCHS = ("small-cnn-4conv", "vgg19", "resnet50", "wide-resnet-28")
LOSS_VARIANTS = ("standard", "cosine", "latent-classifier")

VGG16_URL = "https://download.pytorch.org/models/vgg16-397923af.pth"
VGG16_FILE = "vgg16-397923af.pth"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


# ---------------------------------------------------------------- generator


class Generator(nn.Module):
    """DCGAN generator: a 1x1 input is projected to 4x4 and upsampled by
    strided transposed convolutions until ``image_size``.  Output in [-1, 1].
    """

    def __init__(self, input_dim: int, image_size: int = 32, channels: int = 3, base_width: int = 64):
        super().__init__()
        n_up = math.log2(image_size / 4)
        if image_size < 8 or n_up != int(n_up):
            raise InvalidArgumentError(f"image_size must be 4*2^k with k>=1, got {image_size}")
        n_up = int(n_up)
        self.input_dim = input_dim
        self.output_shape = (channels, image_size, image_size)
        width = base_width * 2 ** (n_up - 1)
        layers = [
            nn.ConvTranspose2d(input_dim, width, 4, 1, 0, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(True),
        ]
        for _ in range(n_up - 1):
            layers += [
                nn.ConvTranspose2d(width, width // 2, 4, 2, 1, bias=False),
                nn.BatchNorm2d(width // 2),
                nn.ReLU(True),
            ]
            width //= 2
        layers += [nn.ConvTranspose2d(width, channels, 4, 2, 1, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        if inputs.ndim != 2 or inputs.shape[1] != self.input_dim:
            raise ShapeError(f"expected (batch, {self.input_dim}) generator input, got {tuple(inputs.shape)}")
        return self.net(inputs[:, :, None, None])


def generate(generator: Generator, inputs: torch.Tensor) -> torch.Tensor:
    return generator(inputs)


# --------------------------------------------------------------- classifiers


class SmallCNN(nn.Module):
    """The weak classifier: four 3x3 conv layers and a linear head."""

    def __init__(self, num_classes: int, in_channels: int = 3, width: int = 32):
        super().__init__()
        w = width

        def block(cin, cout, pool):
            mods = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(True)]
            if pool:
                mods.append(nn.MaxPool2d(2))
            return mods

        self.body = nn.Sequential(
            *block(in_channels, w, False),
            *block(w, 2 * w, True),
            *block(2 * w, 4 * w, True),
            *block(4 * w, 4 * w, True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.head = nn.Linear(4 * w, num_classes)
        self.num_classes = num_classes

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))


class _WideBasic(nn.Module):
    def __init__(self, cin, cout, stride, dropout):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.dropout = nn.Dropout(dropout) if dropout else nn.Identity()
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(o)
        o = self.conv1(o)
        o = self.conv2(self.dropout(F.relu(self.bn2(o))))
        return o + skip


class WideResNet(nn.Module):
    """WRN-depth-k for small images (depth 28 -> 4 blocks per group)."""

    def __init__(self, num_classes: int, depth: int = 28, widen: int = 10, dropout: float = 0.0):
        super().__init__()
        if (depth - 4) % 6:
            raise InvalidArgumentError("WideResNet depth must be 6n+4")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        self.conv = nn.Conv2d(3, widths[0], 3, 1, 1, bias=False)
        groups, cin = [], widths[0]
        for g, stride in zip(widths[1:], (1, 2, 2)):
            for b in range(n):
                groups.append(_WideBasic(cin, g, stride if b == 0 else 1, dropout))
                cin = g
        self.blocks = nn.Sequential(*groups)
        self.bn = nn.BatchNorm2d(cin)
        self.head = nn.Linear(cin, num_classes)
        self.num_classes = num_classes

    def features(self, x):
        o = F.relu(self.bn(self.blocks(self.conv(x))))
        return F.adaptive_avg_pool2d(o, 1).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


def build_classifier(arch_id: str, num_classes: int, **kwargs) -> nn.Module:
    if arch_id == "small-cnn-4conv":
        model = SmallCNN(num_classes, **kwargs)
    elif arch_id == "wide-resnet-28":
        model = WideResNet(num_classes, depth=28, **kwargs)
    elif arch_id == "vgg19":
        model = torchvision.models.vgg19(weights=None, num_classes=num_classes)
    elif arch_id == "resnet50":
        model = torchvision.models.resnet50(weights=None, num_classes=num_classes)
    else:
        raise ConfigurationError(f"unknown classifier arch {arch_id!r}; choose from {CLASSIFIER_ARCHS}")
    model.arch_id = arch_id
    model.num_classes = num_classes
    return model


class LatentClassifier(nn.Module):
    """Classifies codes directly: 3 affine layers with ReLU in between."""

    def __init__(self, latent_dim: int, num_classes: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )
        self.num_classes = num_classes

    @property
    def num_affine_layers(self) -> int:
        return sum(isinstance(m, nn.Linear) for m in self.net)

    def forward(self, z):
        return self.net(z)


# --------------------------------------------------------- feature extractor

_VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
# indices (in torchvision's vgg16().features layout) of the ReLU after each tap
_TAP_INDEX = {"conv1_2": 3, "conv2_2": 8, "conv3_2": 13, "conv4_2": 20, "conv5_2": 27}
_POOLED_INDEX = 29  # relu5_3


def cache_dir() -> Path:
    root = os.environ.get("GLICO_CACHE_DIR") or os.path.join(os.path.expanduser("~"), ".cache", "glico")
    return Path(root)


def _vgg16_layers(width: float) -> nn.Sequential:
    layers, cin = [], 3
    for v in _VGG16_CFG:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            cout = max(1, int(round(v * width)))
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=False)]
            cin = cout
    return nn.Sequential(*layers)


@dataclass(frozen=True)
class ExtractorConfig:
    """How to build the frozen perceptual network.

    ``weights``: ``"imagenet"`` (cached torchvision file, downloaded if
    missing), ``"random"`` (seeded init), ``"auto"`` (imagenet when already
    cached, random otherwise) or a path to a local state-dict file.
    ``input_size``: side length images are bilinearly resized to before
    extraction; ``None`` keeps native resolution.
    ``width``: channel multiplier on the VGG-16 topology (pretrained
    weights need 1.0).
    """

    weights: str = "auto"
    input_size: int | None = 224
    width: float = 1.0
    seed: int = 0


class FeatureExtractor(nn.Module):
    """VGG-16 convolutional trunk with taps at conv{1..5}_2.  Frozen."""

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        super().__init__()
        self.config = config
        self.features = _vgg16_layers(config.width)
        self.weights_source = self._load_weights()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)
        self._identity = None

    def _load_weights(self) -> str:
        cfg = self.config
        source = cfg.weights
        cached = cache_dir() / VGG16_FILE
        if source == "auto":
            source = "imagenet" if cached.exists() and cfg.width == 1.0 else "random"
            if source == "random":
                log.warning("pretrained VGG-16 weights not cached at %s; using seeded random weights", cached)
        if source == "random":
            g = torch.Generator().manual_seed(cfg.seed)
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    fan_out = m.out_channels * 9
                    with torch.no_grad():
                        m.weight.normal_(0, math.sqrt(2.0 / fan_out), generator=g)
                        m.bias.zero_()
            return f"random:{cfg.seed}"
        if cfg.width != 1.0:
            raise ConfigurationError("pretrained extractor weights require width=1.0")
        if source == "imagenet":
            if not cached.exists():
                cached.parent.mkdir(parents=True, exist_ok=True)
                torch.hub.download_url_to_file(VGG16_URL, str(cached), progress=False)
            path = cached
        else:
            path = Path(source)
            if not path.exists():
                raise ConfigurationError(f"extractor weights file {path} not found")
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")} or state
        self.features.load_state_dict(state)
        return f"file:{path.name}"

    def train(self, mode: bool = True):
        return self  # permanently in eval mode

    @property
    def identity(self) -> str:
        if self._identity is None:
            h = hashlib.sha256()
            h.update(repr((self.config.width, self.config.input_size)).encode())
            for k, v in self.features.state_dict().items():
                h.update(k.encode())
                h.update(v.detach().cpu().contiguous().numpy().tobytes())
            self._identity = h.hexdigest()
        return self._identity

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        x = ((x + 1) / 2 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        size = self.config.input_size
        if size is not None and x.shape[-1] != size:
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        return x

    def taps(self, x: torch.Tensor, layers=TAP_LAYERS) -> list[torch.Tensor]:
        wanted = {_TAP_INDEX[name]: name for name in layers}
        out = {}
        h = self.preprocess(x)
        last = max(wanted)
        for idx, mod in enumerate(self.features):
            h = mod(h)
            if idx in wanted:
                out[wanted[idx]] = h
            if idx == last:
                break
        return [out[name] for name in layers]

    def pooled_features(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled relu5_3 activations, used as FID features."""
        h = self.preprocess(x)
        for idx, mod in enumerate(self.features):
            h = mod(h)
            if idx == _POOLED_INDEX:
                break
        return h.mean(dim=(2, 3))


# -------------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossSpec:
    layer_weights: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    gamma: float = 1.0
    variant: str = "standard"
    tap_layers: tuple[str, ...] = field(default=TAP_LAYERS)

    def __post_init__(self):
        if len(self.layer_weights) != len(self.tap_layers):
            raise ConfigurationError("one layer weight per tap layer required")
        if any(w < 0 for w in self.layer_weights) or not any(w > 0 for w in self.layer_weights):
            raise ConfigurationError("layer weights must be >= 0 and not all zero")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")
        if self.variant not in LOSS_VARIANTS:
            raise ConfigurationError(f"unknown loss variant {self.variant!r}")
        unknown = set(self.tap_layers) - set(_TAP_INDEX)
        if unknown:
            raise ConfigurationError(f"unknown tap layers {sorted(unknown)}")


def perceptual_loss(x, x_hat, fe: FeatureExtractor, spec: LossSpec, reduction: str = "mean"):
    """Weighted sum over tap layers of the mean absolute feature difference.

    ``reduction="none"`` returns one value per image.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"image batches differ in shape: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    n = x.shape[0]
    feats = fe.taps(torch.cat([x_hat, x], dim=0), spec.tap_layers)
    total = x.new_zeros(n) if reduction == "none" else x.new_zeros(())
    for w, f in zip(spec.layer_weights, feats):
        if w == 0:
            continue
        diff = (f[:n] - f[n:]).abs()
        total = total + w * (diff.flatten(1).mean(1) if reduction == "none" else diff.mean())
    return total


def _check_labels(y: torch.Tensor, num_classes: int) -> None:
    if bool(((y < 0) | (y >= num_classes)).any()):
        raise InvalidArgumentError(f"labels must lie in [0, {num_classes})")


def cross_entropy_loss(logits: torch.Tensor, y) -> torch.Tensor:
    y = torch.as_tensor(y, device=logits.device)
    if logits.ndim == 1:
        logits, y = logits.unsqueeze(0), y.reshape(1)
    _check_labels(y, logits.shape[-1])
    return F.cross_entropy(logits, y.long())


def cosine_classification_loss(embedding: torch.Tensor, y, prototypes: torch.Tensor | None = None):
    """Mean of ``1 - cos(embedding, prototype[y])``.

    ``prototypes`` defaults to the one-hot table, so ``embedding`` must then
    have one coordinate per class.
    """
    y = torch.as_tensor(y, device=embedding.device)
    if embedding.ndim == 1:
        embedding, y = embedding.unsqueeze(0), y.reshape(1)
    if prototypes is None:
        prototypes = torch.eye(embedding.shape[-1], dtype=embedding.dtype, device=embedding.device)
    _check_labels(y, prototypes.shape[0])
    norms = torch.linalg.vector_norm(embedding, dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateInputError("zero-norm feature vector has no direction")
    target = F.normalize(prototypes[y.long()], dim=-1)
    return (1 - ((embedding / norms) * target).sum(-1)).mean()


def latent_classifier_loss(z: torch.Tensor, y, head: LatentClassifier) -> torch.Tensor:
    return cross_entropy_loss(head(z), y)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    percep: float
    ce: float | None
    ce_count: int
    x_hat: torch.Tensor


def combined_loss(
    x,
    z,
    y,
    generator: Generator,
    classifier: nn.Module | None,
    fe: FeatureExtractor,
    spec: LossSpec,
    *,
    noise: NoiseSpec = NoiseSpec(0, 0.0),
    rng: torch.Generator | None = None,
    noise_mode: str = "concat",
) -> LossBreakdown:
    """Reconstruction loss plus ``gamma`` times the classification term.

    ``y`` holds class ids with :data:`UNLABELED` for unlabeled rows (or is
    ``None``); only labeled rows enter the classification term.  For the
    latent-classifier variant ``classifier`` is the code-space head.
    ``classifier=None`` or ``gamma == 0`` skips the term entirely.
    """
    gen_in = make_generator_input(z, noise, rng, noise_mode)
    x_hat = generator(gen_in)
    percep = perceptual_loss(x, x_hat, fe, spec)
    total = percep
    ce_val, ce_count = None, 0
    if y is not None and classifier is not None and spec.gamma > 0:
        y = torch.as_tensor(y, device=x.device)
        mask = y != UNLABELED
        ce_count = int(mask.sum())
        if ce_count:
            y_l = y[mask]
            if spec.variant == "standard":
                ce = cross_entropy_loss(classifier(x_hat[mask]), y_l)
            elif spec.variant == "cosine":
                ce = cosine_classification_loss(classifier(x_hat[mask]), y_l)
            else:
                ce = latent_classifier_loss(z[mask], y_l, classifier)
            total = percep + spec.gamma * ce
            ce_val = float(ce.detach())
    return LossBreakdown(total, float(percep.detach()), ce_val, ce_count, x_hat)
