"""Alternating adversarial training, checkpoint/resume, inference and ablation runs."""
import json
import math
import os
from contextlib import closing
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
import torch.nn.functional as F

import colorspace as cs
from console import Col, log
from dataio import (FilterPolicy, LabelMode, filter_manifest, iter_batches, load_image,
                    load_samples, resize_to_training, split_manifest)
from errors import CheckpointError, ConfigError, EmptyDatasetError, NumericError
from losses import (LossMode, LossWeights, classification_loss, discriminator_loss,
                    generator_adversarial_loss, generator_objective, l1_chroma_loss,
                    parse_log_line, perceptual_loss)
from metrics import evaluate_set, format_comparison
from networks import (NetworkConfig, build_feature_extractor, discriminator_forward,
                      generator_forward, init_networks, load_checkpoint, load_generator,
                      networks_from_checkpoint, save_checkpoint)

ADAGRAD_EPS = 1e-10
TRAIN_LOG = "train_log.txt"
LATEST = "latest"

ABLATION_MODES = (LossMode.L1_ONLY, LossMode.PER_ONLY, LossMode.L1_PLUS_PER)
ABLATION_LABELS = {LossMode.L1_ONLY: "L1", LossMode.PER_ONLY: "per", LossMode.L1_PLUS_PER: "L1+per"}


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "random"
    channels: int = 64
    seed: int = 0
    weights_path: str = None
    weights_url: str = None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    loss_mode: LossMode = LossMode.FULL
    seed: int = 0
    checkpoint_every: int = None
    max_steps: int = None
    label_mode: LabelMode = LabelMode.SINGLE_CLASS
    network: NetworkConfig = field(default_factory=NetworkConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    workers: int = None

    def __post_init__(self):
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        object.__setattr__(self, "label_mode", LabelMode(self.label_mode))

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1 step")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps cannot be negative")
        self.network.validate()
        return self

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = asdict(self.weights)
        d["loss_mode"] = self.loss_mode.value
        d["label_mode"] = self.label_mode.value
        d["network"] = self.network.to_dict()
        d["extractor"] = asdict(self.extractor)
        return d


@dataclass
class TrainState:
    config: TrainConfig
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    extractor: torch.nn.Module
    g_optimizer: torch.optim.Optimizer
    d_optimizer: torch.optim.Optimizer
    epoch: int = 0
    global_step: int = 0
    device: str = "cpu"

    def metadata(self):
        return {
            "network": self.config.network.to_dict(),
            "train": self.config.to_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "seed": self.config.seed,
            "num_classes": self.config.network.num_classes,
        }


def _adagrad(params, config):
    return torch.optim.Adagrad(params, lr=config.learning_rate, eps=ADAGRAD_EPS,
                               initial_accumulator_value=0.0)


def _extractor(config, device):
    ex = config.extractor
    return build_feature_extractor(kind=ex.kind, seed=ex.seed, channels=ex.channels,
                                   weights_path=ex.weights_path,
                                   weights_url=ex.weights_url).to(device)


def new_train_state(config, device="cpu"):
    config.validate()
    torch.manual_seed(config.seed)
    G, D = init_networks(config.network, config.seed)
    G, D = G.to(device), D.to(device)
    return TrainState(config=config, generator=G, discriminator=D,
                      extractor=_extractor(config, device),
                      g_optimizer=_adagrad(G.parameters(), config),
                      d_optimizer=_adagrad(D.parameters(), config),
                      device=device)


def save_train_checkpoint(state, out_dir):
    name = f"ckpt_{state.global_step}.bin"
    path = os.path.join(out_dir, name)
    save_checkpoint(path, state.generator, state.discriminator, state.metadata(), extra={
        "g_optimizer": state.g_optimizer.state_dict(),
        "d_optimizer": state.d_optimizer.state_dict(),
        "rng_state": torch.get_rng_state(),
    })
    tmp = os.path.join(out_dir, LATEST + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(name + "\n")
    os.replace(tmp, os.path.join(out_dir, LATEST))
    log("CKPT", f"step {state.global_step} -> {path}", Col.DIM)
    return path


def latest_checkpoint(out_dir):
    pointer = os.path.join(out_dir, LATEST)
    if not os.path.isfile(pointer):
        raise FileNotFoundError(f"no checkpoint pointer in {out_dir}")
    with open(pointer, "r", encoding="utf-8") as fh:
        return os.path.join(out_dir, fh.read().strip())


def restore_train_state(path, config, device="cpu"):
    payload = load_checkpoint(path, map_location=device)
    state = new_train_state(config, device)
    G, D = networks_from_checkpoint(payload, expected=config.network)
    state.generator.load_state_dict(G.state_dict())
    state.discriminator.load_state_dict(D.state_dict())
    try:
        state.g_optimizer.load_state_dict(payload["g_optimizer"])
        state.d_optimizer.load_state_dict(payload["d_optimizer"])
        torch.set_rng_state(payload["rng_state"].cpu())
    except (KeyError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"{path} carries no restorable training state: {e}") from e
    meta = payload["metadata"]
    state.epoch = int(meta.get("epoch", 0))
    state.global_step = int(meta.get("global_step", 0))
    log("CKPT", f"resumed from {path} at step {state.global_step}", Col.CYAN)
    return state


def _batch_tensors(batch, device):
    return tuple(torch.as_tensor(a, dtype=torch.float32, device=device)
                 for a in (batch.L_n, batch.ab_target, batch.labels))


def train_step(state, batch, config):
    """One discriminator update followed by one generator update."""
    G, D, V = state.generator, state.discriminator, state.extractor
    L, ab, labels = _batch_tensors(batch, state.device)

    ab_pred, logits = generator_forward(G, L, mode="train")
    D.train()
    real, fake = cs.lab_tensor(L, ab), cs.lab_tensor(L, ab_pred)

    state.d_optimizer.zero_grad(set_to_none=True)
    d_loss = discriminator_loss(discriminator_forward(D, real),
                                discriminator_forward(D, fake.detach()))
    d_value = float(d_loss.detach())
    if not math.isfinite(d_value):
        raise NumericError(f"non-finite discriminator loss at step {state.global_step + 1}",
                           component="d_loss")
    d_loss.backward()
    state.d_optimizer.step()

    active = config.loss_mode.active_terms
    D.requires_grad_(False)
    try:
        terms = {"adv": generator_adversarial_loss(discriminator_forward(D, fake))}
        if "l1" in active:
            terms["l1"] = l1_chroma_loss(ab_pred, ab)
        if "classification" in active:
            terms["classification"] = classification_loss(logits, labels, config.label_mode)
        if "perceptual" in active:
            terms["perceptual"] = perceptual_loss(V, cs.lab_to_rgb_tensor(L, ab_pred),
                                                  cs.lab_to_rgb_tensor(L, ab))
        total, report = generator_objective(terms, config.weights, config.loss_mode)
        state.g_optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.g_optimizer.step()
    finally:
        D.requires_grad_(True)

    state.global_step += 1
    return state, report, d_value


def _truncate_log(path, keep_steps):
    lines = []
    if keep_steps and os.path.isfile(path):
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()[:keep_steps]
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_train_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [parse_log_line(line) for line in fh if line.strip()]


def train(manifest, config, out_dir, policy=None, resume=None, device="cpu"):
    policy = policy or FilterPolicy()
    config = replace(config, label_mode=manifest.label_mode,
                     network=replace(config.network, num_classes=manifest.num_classes))
    config.validate()
    torch.use_deterministic_algorithms(True, warn_only=True)

    samples = load_samples(manifest, policy, size=config.network.image_size, workers=config.workers)
    steps_per_epoch = len(samples) // config.batch_size
    if steps_per_epoch == 0:
        raise EmptyDatasetError(f"{len(samples)} surviving images cannot fill one batch "
                                f"of {config.batch_size}")
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    every = config.checkpoint_every or steps_per_epoch

    os.makedirs(out_dir, exist_ok=True)
    state = restore_train_state(resume, config, device) if resume else new_train_state(config, device)
    log_path = os.path.join(out_dir, TRAIN_LOG)
    _truncate_log(log_path, state.global_step)
    log("TRAIN", f"{len(samples)} samples, {steps_per_epoch} steps/epoch, {total_steps} steps, "
                 f"mode {config.loss_mode.value}", Col.BLUE)

    saved_at = None
    with open(log_path, "a", encoding="utf-8") as log_fh:
        for epoch in range(state.global_step // steps_per_epoch, config.epochs):
            if state.global_step >= total_steps:
                break
            skip = state.global_step - epoch * steps_per_epoch
            reports = []
            with closing(iter_batches(samples, config.batch_size, config.seed, epoch,
                                      skip=skip)) as batches:
                for batch in batches:
                    if state.global_step >= total_steps:
                        break
                    state.epoch = epoch
                    state, report, d_loss = train_step(state, batch, config)
                    log_fh.write(report.to_log_line(state.global_step) + "\n")
                    log_fh.flush()
                    reports.append(report)
                    if state.global_step % every == 0:
                        save_train_checkpoint(state, out_dir)
                        saved_at = state.global_step
            if reports:
                n = len(reports)
                log("TRAIN", f"epoch {epoch + 1}/{config.epochs}: "
                             f"l1 {sum(r.l1 for r in reports) / n:.4f} "
                             f"total {sum(r.total for r in reports) / n:.4f} "
                             f"d {d_loss:.4f}", Col.GREEN)

    if saved_at != state.global_step:
        save_train_checkpoint(state, out_dir)
    return state


# --- inference ---------------------------------------------------------------

class Colorizer:
    def __init__(self, generator, device="cpu"):
        self.device = device
        self.generator = generator.to(device).eval()
        self.size = generator.config.image_size

    @classmethod
    def from_checkpoint(cls, path, device="cpu"):
        return cls(load_generator(path, device), device)

    def colorize(self, image):
        if isinstance(image, np.ndarray):
            image = cs.RgbImage(np.repeat(image[..., None], 3, axis=2) if image.ndim == 2 else image)
        L_full = cs.luminance_from_rgb(image)
        small = cs.normalize(cs.rgb_to_lab(resize_to_training(image, self.size)))
        L_n = torch.as_tensor(small.L_n, dtype=torch.float32, device=self.device)[None, None]
        with torch.no_grad():
            ab_n, _ = generator_forward(self.generator, L_n, mode="eval")
            if (image.height, image.width) != (self.size, self.size):
                ab_n = F.interpolate(ab_n, size=(image.height, image.width),
                                     mode="bilinear", align_corners=False)
        ab = np.moveaxis(ab_n[0].cpu().numpy().astype(np.float64), 0, -1)
        return cs.merge_luminance_chroma(L_full, ab)


def colorize(checkpoint, image, device="cpu"):
    return Colorizer.from_checkpoint(checkpoint, device).colorize(image)


def evaluate_entries(colorizer, manifest, oracle=False, workers=1):
    """Colorize every entry and score it against its own colour original."""
    pairs = []
    for entry in manifest.entries:
        truth = load_image(manifest.abspath(entry))
        pred = truth if oracle else colorizer.colorize(truth)
        pairs.append((pred, truth))
    if not pairs:
        raise EmptyDatasetError("nothing to evaluate: the split is empty")
    report = evaluate_set(pairs, workers=workers)
    log("EVAL", f"{len(pairs)} images: psnr {report.psnr:.2f} ssim {report.ssim:.4f}", Col.CYAN)
    return report


@dataclass
class AblationResult:
    reports: dict
    checkpoints: dict
    table: str


def _write_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def run_ablation(manifest, base_config, out_dir, policy=None, device="cpu"):
    """Train one model per ablation loss mode on one shared split and compare them."""
    policy = policy or FilterPolicy()
    surviving, _ = filter_manifest(manifest, policy, workers=base_config.workers)
    train_split, holdout = split_manifest(surviving)
    if not holdout.entries or not train_split.entries:
        raise EmptyDatasetError("ablation needs both a training and a held-out split")
    log("ABLATE", f"{len(train_split)} train / {len(holdout)} held-out images", Col.MAGENTA)

    reports, checkpoints = {}, {}
    for mode in ABLATION_MODES:
        run_dir = os.path.join(out_dir, mode.value)
        state = train(train_split, replace(base_config, loss_mode=mode), run_dir, policy,
                      device=device)
        checkpoints[mode] = latest_checkpoint(run_dir)
        reports[mode] = evaluate_entries(Colorizer(state.generator, device), holdout)

    table = format_comparison({ABLATION_LABELS[m]: reports[m] for m in ABLATION_MODES})
    os.makedirs(out_dir, exist_ok=True)
    _write_atomic(os.path.join(out_dir, "ablation_table.txt"), table + "\n")
    _write_atomic(os.path.join(out_dir, "ablation.json"), json.dumps(
        {ABLATION_LABELS[m]: reports[m].to_dict() for m in ABLATION_MODES}, indent=2) + "\n")
    log("ABLATE", "comparison written to " + out_dir, Col.GREEN)
    return AblationResult(reports=reports, checkpoints=checkpoints, table=table)
