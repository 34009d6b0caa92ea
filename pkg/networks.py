"""Generator, discriminator and the frozen perceptual feature extractor.

The generator is a U-Net: stride-2 4×4 convolutions down to the bottleneck,
stride-2 4×4 transpose convolutions back up with skip concatenation, a tanh
chroma output and a two-layer classification head on the bottleneck.
"""
import os
from dataclasses import asdict, dataclass, fields
from urllib.parse import urlparse

import requests
import torch
from torch import nn

from console import Col, log, weights_cache_dir
from errors import CheckpointError, ConfigError, ShapeError

INIT_STD = 0.02
CHECKPOINT_FORMAT = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD  = (0.229, 0.224, 0.225)

HTTP_HEADERS = {"User-Agent": "gan-colorizer/1.0 (+weights fetch)"}


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 256
    levels: int = 6
    base_channels: int = 64
    max_channels: int = 512
    num_classes: int = 365
    head_width: int = 512
    disc_channels: tuple = (64, 128, 256, 512)
    disc_fc_width: int = 512
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "disc_channels", tuple(int(c) for c in self.disc_channels))

    def validate(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be at least 1, got {self.levels}")
        if self.image_size < 2 or self.image_size % (2 ** self.levels):
            raise ConfigError(f"image size {self.image_size} is not divisible by 2^{self.levels}; "
                              f"the bottleneck would be sub-pixel")
        if self.bottleneck_size < 2:
            raise ConfigError(f"a 1x1 bottleneck at {self.image_size}px with {self.levels} levels "
                              f"cannot be batch-normalized; use fewer levels")
        if min(self.base_channels, self.max_channels, self.head_width, self.disc_fc_width) < 1:
            raise ConfigError("channel and layer widths must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if len(self.disc_channels) != 4 or min(self.disc_channels) < 1:
            raise ConfigError("the discriminator takes exactly four positive channel widths")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    def encoder_channels(self):
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(self.levels)]

    @property
    def bottleneck_size(self):
        return self.image_size // 2 ** self.levels

    def to_dict(self):
        d = asdict(self)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network keys: {', '.join(sorted(unknown))}")
        return cls(**data)


class GeneratorNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        chans = config.encoder_channels()

        self.encoder = nn.ModuleList()
        prev = 1
        for c in chans:
            self.encoder.append(nn.Sequential(
                nn.Conv2d(prev, c, 4, stride=2, padding=1),
                nn.BatchNorm2d(c),
                nn.ReLU(),
            ))
            prev = c

        self.decoder = nn.ModuleList()
        for k in range(len(chans) - 1, 0, -1):
            out = chans[k - 1]
            self.decoder.append(nn.Sequential(
                nn.ConvTranspose2d(prev, out, 4, stride=2, padding=1),
                nn.BatchNorm2d(out),
                nn.ReLU(),
                nn.Dropout(config.dropout),
            ))
            prev = 2 * out
        self.output = nn.ConvTranspose2d(prev, 2, 4, stride=2, padding=1)

        flat = chans[-1] * config.bottleneck_size ** 2
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, config.head_width),
            nn.ReLU(),
            nn.Linear(config.head_width, config.num_classes),
        )

    def forward(self, x):
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        logits = self.head(x)
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            x = torch.cat([block(x), skip], dim=1)
        return torch.tanh(self.output(x)), logits


class DiscriminatorNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        layers, prev = [], 3
        for c in config.disc_channels:
            layers += [nn.Conv2d(prev, c, 5, stride=2, padding=2), nn.BatchNorm2d(c), nn.ReLU()]
            prev = c
        self.features = nn.Sequential(*layers)
        side = self.conv_output_sizes()[-1]
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(prev * side * side, config.disc_fc_width),
            nn.ReLU(),
            nn.Linear(config.disc_fc_width, 1),
        )

    def conv_output_sizes(self):
        sizes, n = [], self.config.image_size
        for _ in self.config.disc_channels:
            n = (n + 1) // 2
            sizes.append(n)
        return sizes

    def forward(self, x):
        return torch.sigmoid(self.classifier(self.features(x)))


# --- perceptual feature extractors -------------------------------------------

class FeatureExtractor(nn.Module):
    """Fixed transform V: 3-channel image -> feature map. Never trained."""
    out_channels = 0
    stride = 1

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode=True):
        # Always evaluated in inference mode.
        return super().train(False)


class RandomFeatureExtractor(FeatureExtractor):
    def __init__(self, channels=64, seed=0):
        super().__init__()
        self.out_channels = channels
        self.body = nn.Sequential(
            nn.Conv2d(3, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.body:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        self.freeze()

    def forward(self, x):
        return self.body(x)


class Vgg16FeatureExtractor(FeatureExtractor):
    """VGG16 up to relu1_2, fed [0, 1] RGB and normalized with ImageNet statistics."""
    out_channels = 64

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        if weights_path:
            net = vgg16(weights=None)
            try:
                state = torch.load(weights_path, map_location="cpu", weights_only=True)
                net.load_state_dict(state)
            except (OSError, RuntimeError, KeyError) as e:
                raise CheckpointError(f"cannot load VGG16 weights from {weights_path}: {e}") from e
        else:
            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        self.body = net.features[:4]
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.freeze()

    def forward(self, x):
        return self.body((x - self.mean) / self.std)


def _http_get(url, timeout=120):
    return requests.get(url, headers=HTTP_HEADERS, timeout=timeout, allow_redirects=True)


def fetch_weights(url, dest=None, http_get=_http_get):
    """Download a weight file once into the cache; later calls reuse it."""
    if dest is None:
        name = os.path.basename(urlparse(url).path) or "extractor.pth"
        dest = os.path.join(weights_cache_dir(), name)
    if os.path.isfile(dest):
        return dest
    log("WEIGHTS", f"fetching {url}", Col.CYAN)
    try:
        resp = http_get(url)
    except requests.RequestException as e:
        raise CheckpointError(f"weights download failed: {type(e).__name__}") from e
    if resp.status_code != 200:
        raise CheckpointError(f"weights download failed: HTTP {resp.status_code}")
    os.makedirs(os.path.dirname(os.path.abspath(dest)), exist_ok=True)
    tmp = dest + ".part"
    with open(tmp, "wb") as fh:
        fh.write(resp.content)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, dest)
    log("WEIGHTS", f"saved {len(resp.content)} bytes to {dest}", Col.GREEN)
    return dest


def build_feature_extractor(kind="random", seed=0, channels=64, weights_path=None,
                            weights_url=None, http_get=_http_get):
    if kind == "random":
        return RandomFeatureExtractor(channels=channels, seed=seed)
    if kind == "vgg16":
        if weights_url and not weights_path:
            weights_path = fetch_weights(weights_url, http_get=http_get)
        return Vgg16FeatureExtractor(weights_path=weights_path)
    raise ConfigError(f"unknown feature extractor kind: {kind!r}")


# --- forward contracts -------------------------------------------------------

def _check_image_batch(x, channels, size, what):
    if x.dim() != 4 or x.shape[1] != channels or (size and tuple(x.shape[2:]) != (size, size)):
        want = f"B×{channels}×{size}×{size}" if size else f"B×{channels}×H×W"
        raise ShapeError(f"{what} expects {want}, got {tuple(x.shape)}")


def generator_forward(G, L_n, mode="eval"):
    _check_image_batch(L_n, 1, G.config.image_size, "generator")
    G.train(mode == "train")
    return G(L_n)


def discriminator_forward(D, image):
    _check_image_batch(image, 3, D.config.image_size, "discriminator")
    return D(image)


def extract_features(V, image):
    _check_image_batch(image, 3, None, "feature extractor")
    return V(image)


# --- initialization and checkpoints ------------------------------------------

def _init_weights(module, gen):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_networks(config, seed):
    config.validate()
    gen = torch.Generator().manual_seed(seed)
    G, D = GeneratorNet(config), DiscriminatorNet(config)
    _init_weights(G, gen)
    _init_weights(D, gen)
    return G, D


def save_checkpoint(path, generator, discriminator, metadata, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "metadata": metadata,
        "generator": generator.state_dict(),
        "discriminator": discriminator.state_dict(),
    }
    payload.update(extra or {})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, map_location="cpu"):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {type(e).__name__}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a colorizer checkpoint")
    for key in ("metadata", "generator", "discriminator"):
        if key not in payload:
            raise CheckpointError(f"{path} is missing the {key!r} record")
    return payload


def networks_from_checkpoint(payload, expected=None):
    try:
        config = NetworkConfig.from_dict(payload["metadata"]["network"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"checkpoint network record is invalid: {e}") from e
    if expected is not None and expected != config:
        raise CheckpointError("checkpoint was written for a different network config")
    G, D = GeneratorNet(config.validate()), DiscriminatorNet(config)
    try:
        G.load_state_dict(payload["generator"])
        D.load_state_dict(payload["discriminator"])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint tensors do not match the network: {e}") from e
    return G, D


def load_generator(path, device="cpu"):
    G, _ = networks_from_checkpoint(load_checkpoint(path))
    return G.to(device).eval()
