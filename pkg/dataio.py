"""Dataset ingestion: decode, chroma filtering, resizing, manifests and batches."""
import hashlib
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from PIL import Image, UnidentifiedImageError

import colorspace as cs
from console import Col, log, default_workers
from errors import DatasetError, EmptyDatasetError, ImageFormatError, UsageError

TRAINING_SIZE = 256
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
DEFAULT_ATTRIBUTES_FILE = "list_attr_celeba.txt"
WIDE_GRAY_MODES = ("I", "I;16", "I;16B", "I;16L")
PREFETCH_BATCHES = 2


class LabelMode(str, Enum):
    SINGLE_CLASS    = "single-class"
    MULTI_ATTRIBUTE = "multi-attribute"


@dataclass(frozen=True)
class FilterPolicy:
    chroma_threshold: float = 5.0
    grayscale_epsilon: float = 0.0

    def __post_init__(self):
        if self.chroma_threshold < 0 or self.grayscale_epsilon < 0:
            raise ValueError("filter thresholds must be non-negative")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: object  # int class index, or tuple of 0/1 attribute bits

    def label_spec(self):
        if isinstance(self.label, tuple):
            return ",".join(str(int(v)) for v in self.label)
        return str(int(self.label))


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    num_classes: int
    label_mode: LabelMode
    root: str = ""
    class_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "label_mode", LabelMode(self.label_mode))
        if self.num_classes < 1:
            raise DatasetError("num_classes must be positive")
        for e in self.entries:
            if self.label_mode is LabelMode.SINGLE_CLASS:
                if isinstance(e.label, tuple) or not 0 <= int(e.label) < self.num_classes:
                    raise DatasetError(f"class index out of range for {e.path}: {e.label}")
            elif not isinstance(e.label, tuple) or len(e.label) != self.num_classes:
                raise DatasetError(f"attribute vector for {e.path} must have "
                                   f"{self.num_classes} entries")

    def __len__(self):
        return len(self.entries)

    def abspath(self, entry):
        return os.path.join(self.root, entry.path)

    def encode_label(self, entry):
        """One-hot for single-class, 0/1 vector for multi-attribute."""
        vec = np.zeros(self.num_classes, dtype=np.float32)
        if self.label_mode is LabelMode.SINGLE_CLASS:
            vec[int(entry.label)] = 1.0
        else:
            vec[:] = entry.label
        return vec

    def subset(self, entries):
        return replace(self, entries=tuple(entries))


@dataclass(frozen=True)
class FilterStats:
    total: int = 0
    rejected_grayscale: int = 0
    rejected_low_chroma: int = 0
    surviving: int = 0


@dataclass(frozen=True, eq=False)
class SampleBatch:
    L_n: np.ndarray        # B×1×S×S
    ab_target: np.ndarray  # B×2×S×S
    labels: np.ndarray     # B×num_classes

    @property
    def batch_size(self):
        return self.L_n.shape[0]


@dataclass(frozen=True, eq=False)
class SampleSource:
    """Filtered entries of a manifest; pixels are decoded per batch, never held."""
    manifest: DatasetManifest
    size: int = TRAINING_SIZE
    workers: int = 1

    def __len__(self):
        return len(self.manifest)

    @property
    def paths(self):
        return tuple(e.path for e in self.manifest.entries)

    def prepare(self, entry):
        img = resize_to_training(load_image(self.manifest.abspath(entry)), self.size)
        norm = cs.normalize(cs.rgb_to_lab(img))
        return (norm.L_n.astype(np.float32)[None],
                np.moveaxis(norm.ab_n, -1, 0).astype(np.float32),
                self.manifest.encode_label(entry))


# --- images -----------------------------------------------------------------

def load_image(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in WIDE_GRAY_MODES:
                # 16-bit scans span 0..65535
                wide = np.asarray(im).astype(np.int64)
                gray = np.clip((wide + 128) // 257, 0, 255).astype(np.uint8)
                return cs.RgbImage(np.repeat(gray[..., None], 3, axis=2))
            if im.mode in ("1", "L", "LA", "F"):
                gray = np.asarray(im.convert("L"), dtype=np.uint8)
                return cs.RgbImage(np.repeat(gray[..., None], 3, axis=2))
            return cs.RgbImage(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageFormatError(f"cannot decode {path}: {type(e).__name__}", path=path) from e


def save_image(img, path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    Image.fromarray(np.asarray(img.pixels)).save(path)


def resize_image(img, height, width):
    if (img.height, img.width) == (height, width):
        return cs.RgbImage(img.pixels)
    pil = Image.fromarray(np.asarray(img.pixels))
    return cs.RgbImage(np.asarray(pil.resize((width, height), Image.Resampling.BILINEAR), dtype=np.uint8))


def resize_to_training(img, size=TRAINING_SIZE):
    return resize_image(img, size, size)


def filter_reason(img, policy):
    px = img.pixels.astype(np.int16)
    spread = max(np.abs(px[..., 0] - px[..., 1]).max(), np.abs(px[..., 1] - px[..., 2]).max())
    if spread <= policy.grayscale_epsilon:
        return "grayscale"
    if cs.chroma(cs.rgb_to_lab(img)).mean() < policy.chroma_threshold:
        return "low_chroma"
    return None


def is_colorful(img, policy):
    return filter_reason(img, policy) is None


# --- manifests --------------------------------------------------------------

def _image_files(directory):
    return sorted(
        name for name in os.listdir(directory)
        if name.lower().endswith(IMAGE_EXTENSIONS) and os.path.isfile(os.path.join(directory, name))
    )


def _parse_attribute_table(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if lines and len(lines[0]) == 1 and lines[0][0].isdigit():
        lines = lines[1:]
    if not lines:
        raise EmptyDatasetError(f"attribute table is empty: {path}")
    names = tuple(lines[0])
    rows = []
    for parts in lines[1:]:
        if len(parts) != len(names) + 1:
            raise DatasetError(f"attribute row for {parts[0]} has {len(parts) - 1} values, "
                               f"expected {len(names)}")
        try:
            rows.append((parts[0], tuple(1 if int(v) > 0 else 0 for v in parts[1:])))
        except ValueError:
            raise DatasetError(f"attribute row for {parts[0]} holds a non-integer value") from None
    return names, rows


def build_manifest(root, label_mode=LabelMode.SINGLE_CLASS, attributes_file=None):
    label_mode = LabelMode(label_mode)
    if not os.path.isdir(root):
        raise UsageError(f"dataset root is not a readable directory: {root}")
    if label_mode is LabelMode.SINGLE_CLASS:
        classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
        entries = []
        for idx, name in enumerate(classes):
            for fname in _image_files(os.path.join(root, name)):
                entries.append(ManifestEntry(f"{name}/{fname}", idx))
        if not entries:
            raise EmptyDatasetError(f"no images under {root}")
        return DatasetManifest(tuple(entries), len(classes), label_mode, root, tuple(classes))

    table = attributes_file or os.path.join(root, DEFAULT_ATTRIBUTES_FILE)
    if not os.path.isfile(table):
        raise UsageError(f"attribute table not found: {table}")
    names, rows = _parse_attribute_table(table)
    entries = [ManifestEntry(p, bits) for p, bits in sorted(rows)
               if os.path.isfile(os.path.join(root, p))]
    if not entries:
        raise EmptyDatasetError(f"no attribute-labelled images under {root}")
    return DatasetManifest(tuple(entries), len(names), label_mode, root, names)


def write_manifest(manifest, path):
    lines = [
        f"# label_mode={manifest.label_mode.value}",
        f"# num_classes={manifest.num_classes}",
        f"# classes={','.join(manifest.class_names)}",
        f"# root={manifest.root}",
    ]
    lines += [f"{e.path}\t{e.label_spec()}" for e in manifest.entries]
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    meta, entries = {}, []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            rel, sep, spec = line.partition("\t")
            if not sep:
                raise DatasetError(f"{path}:{lineno}: expected path<TAB>label")
            try:
                label = tuple(int(v) for v in spec.split(",")) if "," in spec else int(spec)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: label {spec!r} is not an integer "
                                   f"or a comma-separated bit vector") from None
            entries.append(ManifestEntry(rel, label))
    try:
        mode = LabelMode(meta.get("label_mode", LabelMode.SINGLE_CLASS.value))
    except ValueError:
        raise DatasetError(f"{path}: unknown label_mode {meta['label_mode']!r}") from None
    if mode is LabelMode.MULTI_ATTRIBUTE:
        entries = [ManifestEntry(e.path, e.label if isinstance(e.label, tuple) else (e.label,))
                   for e in entries]
    if "num_classes" in meta:
        try:
            num_classes = int(meta["num_classes"])
        except ValueError:
            raise DatasetError(f"{path}: num_classes {meta['num_classes']!r} "
                               f"is not an integer") from None
    elif mode is LabelMode.SINGLE_CLASS:
        num_classes = max((e.label for e in entries if not isinstance(e.label, tuple)), default=0) + 1
    else:
        num_classes = len(entries[0].label) if entries else 1
    classes = tuple(c for c in meta.get("classes", "").split(",") if c)
    root = meta.get("root") or os.path.dirname(os.path.abspath(path))
    return DatasetManifest(tuple(entries), num_classes, mode, root, classes)


def _split_key(entry):
    return int(hashlib.sha1(entry.path.encode("utf-8")).hexdigest(), 16)


def split_manifest(manifest, holdout_every=10):
    """Deterministic (train, holdout) split: roughly one entry in `holdout_every`."""
    train, holdout = [], []
    for e in manifest.entries:
        (holdout if _split_key(e) % holdout_every == 0 else train).append(e)
    if not holdout and len(train) > 1:
        pick = min(train, key=_split_key)
        train.remove(pick)
        holdout.append(pick)
    return manifest.subset(train), manifest.subset(holdout)


# --- filtering and batching -------------------------------------------------

def _classify_entry(manifest, policy, entry):
    return filter_reason(load_image(manifest.abspath(entry)), policy)


def filter_manifest(manifest, policy, workers=None):
    workers = workers or default_workers()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        reasons = list(pool.map(lambda e: _classify_entry(manifest, policy, e), manifest.entries))
    kept = [e for e, r in zip(manifest.entries, reasons) if r is None]
    stats = FilterStats(
        total=len(reasons),
        rejected_grayscale=sum(r == "grayscale" for r in reasons),
        rejected_low_chroma=sum(r == "low_chroma" for r in reasons),
        surviving=len(kept),
    )
    return manifest.subset(kept), stats


def load_samples(manifest, policy, size=TRAINING_SIZE, workers=None):
    """Filter once up front; the survivors are decoded again batch by batch."""
    workers = workers or default_workers()
    surviving, stats = filter_manifest(manifest, policy, workers)
    if not surviving.entries:
        raise EmptyDatasetError("no images survive filtering")
    log("DATA", f"{stats.surviving}/{stats.total} images survive filtering at {size}x{size}", Col.CYAN)
    return SampleSource(surviving, size, workers)


def epoch_order(num_samples, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(num_samples)


def _stack(futures):
    parts = [f.result() for f in futures]
    return SampleBatch(np.stack([p[0] for p in parts]),
                       np.stack([p[1] for p in parts]),
                       np.stack([p[2] for p in parts]))


def iter_batches(samples, batch_size, seed, epoch=0, skip=0, prefetch=PREFETCH_BATCHES):
    """Yield one epoch of full batches; decoding runs at most `prefetch` batches ahead."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = epoch_order(len(samples), seed, epoch)
    entries = samples.manifest.entries
    starts = range(skip * batch_size, len(order) - batch_size + 1, batch_size)
    with ThreadPoolExecutor(max_workers=samples.workers) as pool:
        pending = deque()
        for start in starts:
            pending.append([pool.submit(samples.prepare, entries[i])
                            for i in order[start:start + batch_size]])
            if len(pending) > prefetch:
                yield _stack(pending.popleft())
        while pending:
            yield _stack(pending.popleft())


def make_batches(manifest, policy, batch_size, seed, epochs=1, size=TRAINING_SIZE, workers=None):
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    samples = load_samples(manifest, policy, size, workers)
    for epoch in range(epochs):
        yield from iter_batches(samples, batch_size, seed, epoch)
