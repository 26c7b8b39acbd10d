"""CT-style preprocessing, training-noise augmentations, dataset manifests,
label ontology, and a reproducible synthetic multi-label dataset generator.

Images are stored as one 8-bit binary PGM (P5) file per channel-slice; a
manifest references the sample stem and the three slices live at
``<stem>_0.pgm``, ``<stem>_1.pgm``, ``<stem>_2.pgm``. Manifest lines are
``stem<TAB>comma-separated-label-ids`` with an empty label field marking an
unlabeled sample.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "VolumeMeta",
    "Sample",
    "LabelOntology",
    "ManifestEntry",
    "AugmentConfig",
    "SyntheticSpec",
    "hu_convert",
    "normalize_window",
    "crop_background",
    "resize_bilinear",
    "stack_slices",
    "augment",
    "write_pgm",
    "read_pgm",
    "load_manifest",
    "save_manifest",
    "load_sample_image",
    "load_samples",
    "generate_synthetic_dataset",
]


class DataError(ValueError):
    pass


def atomic_write_text(path, text: str) -> None:
    """Write-temp-then-rename so readers never observe partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


@dataclass(frozen=True)
class VolumeMeta:
    slope: float
    intercept: float
    window: tuple[float, float] = (-1024.0, 1024.0)
    slice_count: int = 0
    subject_id: str = ""

    def __post_init__(self):
        if self.window[1] <= self.window[0]:
            raise DataError(f"window hi must exceed lo, got {self.window}")


@dataclass
class Sample:
    """Three stacked slices plus an optional multi-hot label vector."""

    stem: str
    image: np.ndarray  # (3, H, W) uint8
    labels: np.ndarray | None  # (L,) multi-hot, None for unlabeled
    source: str = "labeled"  # labeled | pseudo | unlabeled


@dataclass
class LabelOntology:
    labels: dict[int, str]
    exclusive_pairs: set[tuple[int, int]] = field(default_factory=set)

    def __post_init__(self):
        pairs = set()
        for a, b in self.exclusive_pairs:
            if a == b:
                raise DataError(f"label {a} cannot exclude itself")
            if a not in self.labels or b not in self.labels:
                raise DataError(f"exclusive pair ({a}, {b}) references unknown label")
            pairs.add((min(a, b), max(a, b)))
        self.exclusive_pairs = pairs

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def excludes(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.exclusive_pairs

    def save(self, path) -> None:
        lines = [f"LABEL {i} {self.labels[i]}" for i in sorted(self.labels)]
        lines += [f"EXCLUSIVE {a} {b}" for a, b in sorted(self.exclusive_pairs)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "LabelOntology":
        labels: dict[int, str] = {}
        pairs: set[tuple[int, int]] = set()
        for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if parts[0] == "LABEL" and len(parts) >= 3:
                labels[int(parts[1])] = " ".join(parts[2:])
            elif parts[0] == "EXCLUSIVE" and len(parts) == 3:
                pairs.add((int(parts[1]), int(parts[2])))
            else:
                raise DataError(f"{path}:{ln}: unrecognized ontology line {raw!r}")
        return cls(labels=labels, exclusive_pairs=pairs)


# ----------------------------------------------------------------------
# preprocessing


def hu_convert(raw: np.ndarray, slope: float, intercept: float) -> np.ndarray:
    """Hounsfield conversion: HU = raw * slope + intercept."""
    return np.asarray(raw, dtype=np.float64) * slope + intercept


def normalize_window(hu: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clamp to [lo, hi] then map affinely onto [0, 255]."""
    if hi <= lo:
        raise DataError(f"window hi must exceed lo, got ({lo}, {hi})")
    clamped = np.clip(np.asarray(hu, dtype=np.float64), lo, hi)
    # divide before scaling so the hi endpoint lands exactly on 255
    return (clamped - lo) / (hi - lo) * 255.0


def crop_background(image: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Tight bounding box of pixels above threshold; all-background images
    come back unchanged."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataError(f"crop_background expects a 2-D slice, got {image.ndim}-D")
    mask = image > threshold
    if not mask.any():
        return image
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return image[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned sampling: output i maps to i * (n_in - 1) / (n_out - 1)
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D slice or a (C, H, W) stack."""
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise DataError(f"resize target must be >= 1x1, got {(th, tw)}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return np.stack([resize_bilinear(ch, target) for ch in image])
    h, w = image.shape
    if (h, w) == (th, tw):
        return image.copy()
    ys = _axis_coords(h, th)
    xs = _axis_coords(w, tw)
    y0 = np.minimum(ys.astype(np.int64), h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = image[np.ix_(y0, x0)]
    tr = image[np.ix_(y0, x1)]
    bl = image[np.ix_(y1, x0)]
    br = image[np.ix_(y1, x1)]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def stack_slices(volume: list[np.ndarray]) -> list[np.ndarray]:
    """Group consecutive slices into non-overlapping triples; the trailing
    remainder of one or two slices is dropped."""
    if len(volume) < 3:
        if volume:
            warnings.warn(
                f"volume has {len(volume)} slice(s); need 3 for a sample",
                stacklevel=2,
            )
        return []
    out = []
    for i in range(0, len(volume) - 2, 3):
        out.append(np.stack(volume[i : i + 3]))
    return out


# ----------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    prob: float = 0.5  # independent per-augmentation apply probability
    rotate_deg: float = 15.0
    crop_area: tuple[float, float] = (0.6, 1.0)


def _rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    # inverse mapping around the image center, bilinear, zero fill; one
    # coordinate map shared by all channels
    h, w = img.shape[1:]
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    src_y = cos_t * dy + sin_t * dx + cy
    src_x = -sin_t * dy + cos_t * dx + cx
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    fy = src_y - y0
    fx = src_x - x0

    def sample(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid, vals, 0.0)

    tl = sample(y0, x0)
    tr = sample(y0, x0 + 1)
    bl = sample(y0 + 1, x0)
    br = sample(y0 + 1, x0 + 1)
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def _autocontrast_channel(ch: np.ndarray) -> np.ndarray:
    lo = ch.min()
    hi = ch.max()
    if hi <= lo:
        return ch
    return (ch - lo) / (hi - lo) * 255.0


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    training: bool = True,
) -> np.ndarray:
    """Noise for the student: rotation, grayscale, auto-contrast, random
    resized crop, each applied independently with cfg.prob. In eval mode the
    input is returned untouched (noise is disabled at prediction time)."""
    if not training:
        return image
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"augment expects a (3, H, W) image, got {img.shape}")
    h, w = img.shape[1:]

    if rng.random() < cfg.prob:
        angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
        img = _rotate_image(img, angle)
    if rng.random() < cfg.prob:
        img = np.broadcast_to(img.mean(axis=0, keepdims=True), img.shape).copy()
    if rng.random() < cfg.prob:
        img = np.stack([_autocontrast_channel(ch) for ch in img])
    if rng.random() < cfg.prob:
        area = rng.uniform(cfg.crop_area[0], cfg.crop_area[1])
        side = np.sqrt(area)
        ch_ = min(h, max(1, int(round(h * side))))
        cw_ = min(w, max(1, int(round(w * side))))
        r0 = int(rng.integers(0, h - ch_ + 1))
        c0 = int(rng.integers(0, w - cw_ + 1))
        img = resize_bilinear(img[:, r0 : r0 + ch_, c0 : c0 + cw_], (h, w))
    return img


# ----------------------------------------------------------------------
# PGM and manifest I/O


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary portable graymap (P5)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataError(f"PGM stores a 2-D image, got shape {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, single whitespace, then raster
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        fields.append(blob[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise DataError(f"{path}: expected 8-bit PGM, maxval {maxval}")
    if len(blob) - i < h * w:
        raise DataError(f"{path}: truncated raster")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=i)
    return data.reshape(h, w).copy()


@dataclass(frozen=True)
class ManifestEntry:
    stem: str
    labels: tuple[int, ...] | None  # None = unlabeled


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    lines = []
    for e in entries:
        label_field = "" if e.labels is None else ",".join(str(i) for i in e.labels)
        lines.append(f"{e.stem}\t{label_field}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> list[ManifestEntry]:
    entries = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        if not raw.strip():
            continue
        if "\t" not in raw:
            raise DataError(f"{path}:{ln}: expected `stem<TAB>labels`, got {raw!r}")
        stem, label_field = raw.split("\t", 1)
        if label_field == "":
            labels = None
        else:
            labels = tuple(int(v) for v in label_field.split(","))
        entries.append(ManifestEntry(stem=stem, labels=labels))
    return entries


def load_sample_image(root, stem: str) -> np.ndarray:
    """Stack the three channel-slice PGMs for a sample stem."""
    root = Path(root)
    return np.stack([read_pgm(root / f"{stem}_{i}.pgm") for i in range(3)])


def _loader_threads() -> int:
    raw = os.environ.get("MAKNET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def load_samples(
    root, manifest_path, num_labels: int, source: str, threads: int | None = None
) -> list[Sample]:
    """Load every manifest entry eagerly. `MAKNET_THREADS` (or `threads`)
    caps parallel image reads; results keep manifest order either way."""
    root = Path(root)
    entries = load_manifest(manifest_path)
    threads = _loader_threads() if threads is None else max(1, threads)
    if threads > 1 and len(entries) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(lambda e: load_sample_image(root, e.stem), entries))
    else:
        images = [load_sample_image(root, e.stem) for e in entries]
    samples = []
    for e, image in zip(entries, images):
        if e.labels is None:
            labels = None
        else:
            labels = np.zeros(num_labels, dtype=np.float64)
            labels[list(e.labels)] = 1.0
        samples.append(Sample(stem=e.stem, image=image, labels=labels, source=source))
    return samples


# ----------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class SyntheticSpec:
    num_labeled: int = 500
    num_unlabeled: int = 5000
    num_val: int = 400
    num_test: int = 800
    num_labels: int = 12
    image_size: int = 64
    prior: float = 0.3
    exclusive_pairs: tuple[tuple[int, int], ...] = ((0, 1), (2, 3))

    def __post_init__(self):
        if self.num_labels < 4:
            raise DataError(f"need at least 4 labels, got {self.num_labels}")
        if self.image_size < 16:
            raise DataError(f"image size must be >= 16, got {self.image_size}")
        flat = [i for pair in self.exclusive_pairs for i in pair]
        if len(set(flat)) != len(flat) or any(i >= self.num_labels for i in flat):
            raise DataError(f"bad exclusive pairs {self.exclusive_pairs}")


_STRUCTURE_NAMES = [
    "disk", "ring", "block", "frame", "hbar", "vbar", "plus", "stripe",
    "dots", "wedge", "checker", "xcross",
]


def _paint(canvas: np.ndarray, label: int, rng: np.random.Generator) -> None:
    """Draw the structure family for `label` at a random position/scale."""
    h, w = canvas.shape
    size = int(rng.integers(max(8, h // 5), max(10, h // 3)))
    cy = int(rng.integers(size, h - size)) if h > 2 * size else h // 2
    cx = int(rng.integers(size, w - size)) if w > 2 * size else w // 2
    val = float(rng.uniform(150, 235))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    d2 = dy * dy + dx * dx
    kind = label % len(_STRUCTURE_NAMES)
    t = max(1, size // 5)
    if kind == 0:  # disk
        mask = d2 <= (size // 2) ** 2
    elif kind == 1:  # ring
        r_out = size // 2
        r_in = max(1, r_out - t)
        mask = (d2 <= r_out**2) & (d2 >= r_in**2)
    elif kind == 2:  # block
        mask = (np.abs(dy) <= size // 2) & (np.abs(dx) <= size // 2)
    elif kind == 3:  # frame
        half = size // 2
        mask = (
            (np.abs(dy) <= half) & (np.abs(dx) <= half)
            & ((np.abs(dy) >= half - t) | (np.abs(dx) >= half - t))
        )
    elif kind == 4:  # hbar
        mask = (np.abs(dy) <= t) & (np.abs(dx) <= size)
    elif kind == 5:  # vbar
        mask = (np.abs(dx) <= t) & (np.abs(dy) <= size)
    elif kind == 6:  # plus
        half = size // 2
        mask = ((np.abs(dy) <= t) | (np.abs(dx) <= t)) & (
            (np.abs(dy) <= half) & (np.abs(dx) <= half)
        )
    elif kind == 7:  # stripe
        mask = (np.abs(dy - dx) <= t) & (np.abs(dy) <= size) & (np.abs(dx) <= size)
    elif kind == 8:  # dots
        spacing = max(3, size // 2)
        mody = np.abs(((yy - cy) % spacing))
        modx = np.abs(((xx - cx) % spacing))
        mask = (
            (mody <= 1) & (modx <= 1)
            & (np.abs(dy) <= size) & (np.abs(dx) <= size)
        )
    elif kind == 9:  # wedge
        half = size // 2
        mask = (np.abs(dy) <= half) & (np.abs(dx) <= half) & (dx >= dy)
    elif kind == 10:  # checker
        half = size // 2
        cell = max(2, size // 4)
        parity = ((yy - cy) // cell + (xx - cx) // cell) % 2 == 0
        mask = parity & (np.abs(dy) <= half) & (np.abs(dx) <= half)
    else:  # xcross
        mask = ((np.abs(dy - dx) <= t) | (np.abs(dy + dx) <= t)) & (
            (np.abs(dy) <= size) & (np.abs(dx) <= size)
        )
    canvas[mask] = np.maximum(canvas[mask], val)


def _draw_labels(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Exclusive pairs share one uniform draw so they never co-occur and each
    member's marginal equals `prior`; remaining labels are independent
    Bernoulli(prior). All-negative draws are rejected (the manifest format
    reserves an empty label field for unlabeled samples), which inflates the
    marginals by under one percent at the default 12 labels."""
    while True:
        labels = np.zeros(spec.num_labels, dtype=np.int64)
        paired = set()
        for a, b in spec.exclusive_pairs:
            u = rng.random()
            if u < spec.prior:
                labels[a] = 1
            elif u < 2 * spec.prior:
                labels[b] = 1
            paired.update((a, b))
        for label in range(spec.num_labels):
            if label not in paired and rng.random() < spec.prior:
                labels[label] = 1
        if labels.any():
            return labels


def _render_sample(
    spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    size = spec.image_size
    slices = []
    base = rng.normal(24.0, 6.0, size=(size, size))
    offsets = rng.integers(-1, 2, size=(3, 2))
    # per-structure parameters must match across slices: fork one stream
    # per label and reuse its seed sequence for each slice
    label_seeds = {int(l): rng.integers(0, 2**63) for l in np.flatnonzero(labels)}
    for s in range(3):
        canvas = base + rng.normal(0.0, 2.0, size=(size, size))
        for label, seed in label_seeds.items():
            srng = np.random.default_rng(seed)
            shifted = np.zeros_like(canvas)
            _paint(shifted, label, srng)
            dy, dx = offsets[s]
            shifted = np.roll(np.roll(shifted, int(dy), axis=0), int(dx), axis=1)
            canvas = np.maximum(canvas, shifted)
        slices.append(np.clip(np.round(canvas), 0, 255).astype(np.uint8))
    return np.stack(slices)


def generate_synthetic_dataset(root, spec: SyntheticSpec, seed: int) -> dict[str, Path]:
    """Write images, manifests, ontology, and the (hidden) unlabeled ground
    truth under `root`. Fully reproducible from (spec, seed): every sample
    uses its own counter-based rng stream."""
    root = Path(root)
    splits = {
        "labeled": (0, spec.num_labeled, True),
        "unlabeled": (1, spec.num_unlabeled, False),
        "val": (2, spec.num_val, True),
        "test": (3, spec.num_test, True),
    }
    paths: dict[str, Path] = {}
    truth_entries: list[ManifestEntry] = []
    for split, (split_idx, count, labeled) in splits.items():
        img_dir = root / "images" / split
        img_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(count):
            rng = np.random.default_rng([seed, split_idx, i])
            labels = _draw_labels(spec, rng)
            image = _render_sample(spec, labels, rng)
            stem = f"images/{split}/{i:05d}"
            for s in range(3):
                write_pgm(root / f"{stem}_{s}.pgm", image[s])
            label_ids = tuple(int(v) for v in np.flatnonzero(labels))
            entries.append(
                ManifestEntry(stem=stem, labels=label_ids if labeled else None)
            )
            if not labeled:
                truth_entries.append(ManifestEntry(stem=stem, labels=label_ids))
        manifest = root / f"{split}.tsv"
        save_manifest(manifest, entries)
        paths[split] = manifest
    truth = root / "unlabeled_truth.tsv"
    save_manifest(truth, truth_entries)
    paths["unlabeled_truth"] = truth

    ontology = LabelOntology(
        labels={
            i: _STRUCTURE_NAMES[i % len(_STRUCTURE_NAMES)] + (
                "" if i < len(_STRUCTURE_NAMES) else f"_{i // len(_STRUCTURE_NAMES)}"
            )
            for i in range(spec.num_labels)
        },
        exclusive_pairs=set(spec.exclusive_pairs),
    )
    ontology_path = root / "ontology.txt"
    ontology.save(ontology_path)
    paths["ontology"] = ontology_path
    return paths
