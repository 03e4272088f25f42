"""Tagged datasets on disk: derivation from class folders, synthetic scenes, batching.

A manifest is a JSON-lines file. The first line is a header with the split,
class count, image size and seed; every further line is one entry with an
image path, its tag vector and optionally a ground-truth label map. Paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter

from decompseg.core import TagLabel
from decompseg.errors import InputError, LoadError, ResourceError

MANIFEST_FORMAT = "decompseg-manifest/1"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass(frozen=True)
class Entry:
    image: str
    label: TagLabel
    mask: str | None = None


@dataclass
class DatasetManifest:
    entries: list
    split: str
    num_classes: int
    image_size: tuple
    seed: int
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.split not in ("train", "val", "all"):
            raise InputError(f"unknown split {self.split!r}")
        for e in self.entries:
            if e.label.num_classes != self.num_classes:
                raise InputError(f"{e.image}: label has {e.label.num_classes} classes, manifest {self.num_classes}")
            if e.label.y[-1] != 1:
                raise InputError(f"{e.image}: background bit not set")

    def __len__(self):
        return len(self.entries)

    def path(self, rel: str) -> Path:
        return self.root / rel

    @property
    def has_masks(self) -> bool:
        return bool(self.entries) and all(e.mask is not None for e in self.entries)

    def subset(self, indices: Sequence[int], split: str | None = None) -> "DatasetManifest":
        return DatasetManifest([self.entries[i] for i in indices], split or self.split,
                               self.num_classes, self.image_size, self.seed, self.root)

    def to_text(self) -> str:
        header = {"format": MANIFEST_FORMAT, "split": self.split, "num_classes": self.num_classes,
                  "image_size": list(self.image_size), "seed": self.seed}
        lines = [json.dumps(header, sort_keys=True)]
        for e in self.entries:
            rec = {"image": e.image, "y": list(e.label.y), "mode": e.label.mode}
            if e.mask is not None:
                rec["mask"] = e.mask
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path: str | Path, check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
            header = json.loads(lines[0])
            records = [json.loads(line) for line in lines[1:] if line.strip()]
        except (OSError, IndexError, json.JSONDecodeError) as exc:
            raise LoadError(f"cannot read manifest {path}: {exc}") from exc
        if header.get("format") != MANIFEST_FORMAT:
            raise LoadError(f"{path}: not a {MANIFEST_FORMAT} file")
        entries = [Entry(r["image"], TagLabel(tuple(r["y"]), r.get("mode", "indicator")), r.get("mask"))
                   for r in records]
        m = cls(entries, header["split"], header["num_classes"], header["image_size"], header["seed"], path.parent)
        if check_paths:
            for e in m.entries:
                for rel in (e.image, e.mask):
                    if rel is not None and not m.path(rel).exists():
                        raise ResourceError(f"{path}: missing file {rel}")
        return m


def check_disjoint(a: DatasetManifest, b: DatasetManifest) -> None:
    shared = {e.image for e in a.entries} & {e.image for e in b.entries}
    if shared:
        raise InputError(f"{len(shared)} images appear in both splits, e.g. {sorted(shared)[0]}")


def _stratified_split(groups: list[list[int]], ratio: float, rng: np.random.Generator) -> tuple[list, list]:
    train, val = [], []
    for idx in groups:
        idx = list(rng.permutation(idx)) if idx else []
        n_train = int(round(ratio * len(idx)))
        train += idx[:n_train]
        val += idx[n_train:]
    return sorted(int(i) for i in train), sorted(int(i) for i in val)


def split_manifest(manifest: DatasetManifest, ratio: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Split by tag pattern so both splits keep the positive/negative balance."""
    if not 0 < ratio < 1:
        raise InputError(f"split ratio must lie in (0, 1), got {ratio}")
    groups: dict[tuple, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        groups.setdefault(tuple(v > 0 for v in e.label.y), []).append(i)
    rng = np.random.default_rng(seed)
    train, val = _stratified_split([groups[k] for k in sorted(groups)], ratio, rng)
    return manifest.subset(train, "train"), manifest.subset(val, "val")


# ---------------------------------------------------------------------------
# derivation from class folders


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise ResourceError(f"not a directory: {directory}")
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _read_rgb(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except Exception as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc


def derive_tagged_dataset(
    positive_dir: str | Path,
    negative_dir: str | Path,
    n_pos: int,
    n_neg: int,
    size: tuple[int, int],
    split_ratio: float,
    seed: int,
    out_dir: str | Path,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Binary tagged dataset: sampled positives get ``(1, 1)``, negatives ``(0, 1)``.

    Selected images are resized (bilinear, no aspect preservation) and written
    as PNG under ``out_dir/images``; ``train.jsonl`` and ``val.jsonl`` are saved
    next to them.
    """
    pos = _list_images(Path(positive_dir))
    neg = _list_images(Path(negative_dir))
    if len(pos) < n_pos or len(neg) < n_neg:
        raise ResourceError(
            f"need {n_pos} positive and {n_neg} negative images, found {len(pos)} and {len(neg)}"
        )
    rng = np.random.default_rng(seed)
    pos_pick = sorted(rng.choice(len(pos), n_pos, replace=False).tolist())
    neg_pick = sorted(rng.choice(len(neg), n_neg, replace=False).tolist())

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    h, w = size
    entries = []
    for tag, files, picks in (("pos", pos, pos_pick), ("neg", neg, neg_pick)):
        label = TagLabel((1.0, 1.0)) if tag == "pos" else TagLabel((0.0, 1.0))
        for j, i in enumerate(picks):
            rel = f"images/{tag}_{j:06d}.png"
            _read_rgb(files[i]).resize((w, h), Image.BILINEAR).save(out_dir / rel)
            entries.append(Entry(rel, label))
    everything = DatasetManifest(entries, "all", 2, (h, w), seed, out_dir)
    n = len(pos_pick)
    train_idx, val_idx = _stratified_split([list(range(n)), list(range(n, len(entries)))], split_ratio, rng)
    train, val = everything.subset(train_idx, "train"), everything.subset(val_idx, "val")
    check_disjoint(train, val)
    train.save(out_dir / "train.jsonl")
    val.save(out_dir / "val.jsonl")
    return train, val


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticSceneParams:
    canvas_size: tuple = (64, 64)
    num_foreground_classes: int = 1
    shapes_per_class: tuple = (1, 2)
    shape_kinds: tuple = ("ellipse", "rectangle", "triangle")
    size_range: tuple = (0.45, 0.8)  # shape extent as a fraction of the canvas side
    fill_textures: tuple = ("solid", "noise", "stripes")
    background_textures: tuple = ("gradient", "noise", "stripes")
    # colored backgrounds keep "saturated color somewhere" from being a presence cue
    background_saturation: tuple = (0.0, 0.5)
    min_hue_gap: float = 0.12  # foreground hues keep this circular distance from the background hue
    foreground_presence_probability: float = 0.5
    correlated_nuisance: bool = False
    min_shape_area: int = 4  # pixels; smaller rasterizations count as degenerate
    max_attempts: int = 20

    def __post_init__(self):
        self.canvas_size = tuple(self.canvas_size)
        self.shapes_per_class = tuple(self.shapes_per_class)
        self.size_range = tuple(self.size_range)
        self.background_saturation = tuple(self.background_saturation)
        h, w = self.canvas_size
        if h % 16 or w % 16:
            raise InputError(f"canvas {h}x{w} must be divisible by 16")
        lo, hi = self.shapes_per_class
        if lo < 1 or hi < lo:
            raise InputError(f"bad shapes-per-class range {self.shapes_per_class}")
        if not 0 < self.size_range[0] <= self.size_range[1] <= 1:
            raise InputError(f"bad size range {self.size_range}")
        if not (self.shape_kinds and self.fill_textures and self.background_textures):
            raise InputError("shape kinds and textures must be nonempty")
        if not 0 <= self.background_saturation[0] <= self.background_saturation[1] <= 1:
            raise InputError(f"bad background saturation range {self.background_saturation}")
        if not 0 <= self.foreground_presence_probability <= 1:
            raise InputError("presence probability must lie in [0, 1]")
        if self.num_foreground_classes < 1:
            raise InputError("need at least one foreground class")

    @property
    def num_classes(self) -> int:
        return self.num_foreground_classes + 1


def _smooth_noise(rng, h, w, scale=8):
    coarse = rng.random((h // scale + 2, w // scale + 2)).astype(np.float32)
    img = Image.fromarray(coarse).resize((w + 2 * scale, h + 2 * scale), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32)[scale:scale + h, scale:scale + w]


def _background(rng, kind, h, w, hue, saturation) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    base = rng.uniform(0.3, 0.7)
    if kind == "gradient":
        theta = rng.uniform(0, 2 * math.pi)
        ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
        v = base + rng.uniform(0.1, 0.25) * (ramp - ramp.mean())
    elif kind == "noise":
        v = base + rng.uniform(0.1, 0.25) * (_smooth_noise(rng, h, w) - 0.5)
    elif kind == "stripes":
        theta = rng.uniform(0, math.pi)
        period = rng.uniform(6, 16)
        v = base + 0.08 * np.sin(2 * math.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period)
    else:
        raise InputError(f"unknown background texture {kind!r}")
    color = 1 - saturation + saturation * np.array(colorsys.hsv_to_rgb(hue, 1.0, 1.0), dtype=np.float32)
    rgb = v[..., None] * color[None, None, :] + rng.normal(0, 0.02, size=(h, w, 3))
    return np.clip(rgb, 0, 1).astype(np.float32)


def _hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1 - d)


def _fill(rng, kind, cls, n_fg, h, w, avoid_hue=None, gap=0.0) -> np.ndarray:
    band = 1.0 / n_fg
    for _ in range(20):
        hue = (cls * band + rng.uniform(0.1, 0.9) * band) % 1.0
        if avoid_hue is None or _hue_distance(hue, avoid_hue) >= gap:
            break
    rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.6, 1.0)), dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    if kind == "solid":
        shade = np.ones((h, w), np.float32)
    elif kind == "noise":
        shade = 0.8 + 0.4 * _smooth_noise(rng, h, w, scale=4)
    elif kind == "stripes":
        theta = rng.uniform(0, math.pi)
        shade = 0.85 + 0.15 * np.sign(np.sin(2 * math.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / rng.uniform(4, 10)))
    else:
        raise InputError(f"unknown fill texture {kind!r}")
    return np.clip(rgb[None, None, :] * shade[..., None], 0, 1)


def _shape_polygon(rng, kind, h, w, size_range):
    side = min(h, w)
    sx, sy = (rng.uniform(*size_range) * side for _ in range(2))
    cx, cy = rng.uniform(sx / 2, w - sx / 2), rng.uniform(sy / 2, h - sy / 2)
    if kind == "ellipse":
        return "ellipse", [cx - sx / 2, cy - sy / 2, cx + sx / 2, cy + sy / 2]
    if kind == "rectangle":
        pts = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    elif kind == "triangle":
        pts = [(0, -1), (1, 1), (-1, 1)]
    else:
        raise InputError(f"unknown shape kind {kind!r}")
    theta = rng.uniform(-0.4, 0.4)
    c, s = math.cos(theta), math.sin(theta)
    poly = [(cx + c * px * sx / 2 - s * py * sy / 2, cy + s * px * sx / 2 + c * py * sy / 2) for px, py in pts]
    return "polygon", poly


def _rasterize(shape, h, w) -> np.ndarray:
    im = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(im)
    kind, geom = shape
    if kind == "ellipse":
        draw.ellipse(geom, fill=1)
    else:
        draw.polygon(geom, fill=1)
    return np.asarray(im, dtype=bool)


def render_scene(params: SyntheticSceneParams, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, TagLabel]:
    """One image in [0, 1] (H, W, 3), its label map (background = K - 1) and tag."""
    h, w = params.canvas_size
    k = params.num_classes
    for _ in range(params.max_attempts):
        present = [c for c in range(params.num_foreground_classes)
                   if rng.random() < params.foreground_presence_probability]
        bg_hue, bg_sat = rng.random(), rng.uniform(*params.background_saturation)
        image = _background(rng, rng.choice(params.background_textures), h, w, bg_hue, bg_sat)
        labels = np.full((h, w), k - 1, dtype=np.uint8)
        if params.correlated_nuisance and rng.random() < (0.8 if present else 0.1):
            # gray disk: looks unlike the background texture but belongs to the background class
            blob = _rasterize(_shape_polygon(rng, "ellipse", h, w, (0.2, 0.35)), h, w)
            image[blob] = rng.uniform(0.15, 0.3)
        shapes = [(c, kind) for c in present
                  for kind in rng.choice(params.shape_kinds, rng.integers(params.shapes_per_class[0],
                                                                          params.shapes_per_class[1] + 1))]
        degenerate = False
        for c, kind in shapes:
            region = _rasterize(_shape_polygon(rng, kind, h, w, params.size_range), h, w)
            degenerate |= int(region.sum()) < params.min_shape_area
            fill = _fill(rng, rng.choice(params.fill_textures), c, params.num_foreground_classes, h, w,
                         bg_hue, params.min_hue_gap)
            image[region] = fill[region]
            labels[region] = c
        if not degenerate and all((labels == c).any() for c in present):
            areas = np.bincount(labels.ravel(), minlength=k)
            tag = TagLabel(tuple(1.0 if (areas[c] > 0 or c == k - 1) else 0.0 for c in range(k)))
            return image, labels, tag
    raise InputError(f"could not place every present class after {params.max_attempts} attempts")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def generate_synthetic(
    params: SyntheticSceneParams,
    n: int,
    seed: int,
    out_dir: str | Path,
    split: str = "all",
) -> DatasetManifest:
    """Render ``n`` scenes to ``out_dir`` and return their manifest (also saved as ``{split}.jsonl``).

    Scene ``i`` draws from its own generator seeded by ``(seed, i)``, so
    datasets of different length share their common prefix.
    """
    if n < 1:
        raise InputError(f"n must be positive, got {n}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        image, labels, tag = render_scene(params, np.random.default_rng([seed, i]))
        img_rel, mask_rel = f"images/{i:06d}.png", f"masks/{i:06d}.png"
        Image.fromarray(to_uint8(image)).save(out_dir / img_rel)
        Image.fromarray(labels, mode="L").save(out_dir / mask_rel)
        entries.append(Entry(img_rel, tag, mask_rel))
    manifest = DatasetManifest(entries, split, params.num_classes, params.canvas_size, seed, out_dir)
    manifest.save(out_dir / f"{split}.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# loading


class Batch(NamedTuple):
    images: torch.Tensor        # (B, 3, H, W) in [0, 1]
    labels: torch.Tensor        # (B, K)
    masks: torch.Tensor | None  # (B, H, W) int64 label maps
    indices: list


def load_image(path: Path, size: tuple | None = None) -> np.ndarray:
    im = _read_rgb(path)
    if size is not None and im.size != (size[1], size[0]):
        im = im.resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0


def load_label_map(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.int64)
    except Exception as exc:
        raise LoadError(f"cannot read mask {path}: {exc}") from exc


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def load_batches(
    manifest: DatasetManifest,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
    skip: int = 0,
) -> Iterator[Batch]:
    """Yield batches in a fixed order given ``(shuffle, seed, epoch)``; the last may be partial.

    ``skip`` drops that many leading batches, used when resuming mid-epoch.
    """
    if batch_size < 1:
        raise InputError(f"batch size must be >= 1, got {batch_size}")
    order = epoch_order(len(manifest), shuffle, seed, epoch)
    with_masks = manifest.has_masks
    for start in range(skip * batch_size, len(order), batch_size):
        idx = [int(i) for i in order[start:start + batch_size]]
        entries = [manifest.entries[i] for i in idx]
        images = np.stack([load_image(manifest.path(e.image), manifest.image_size) for e in entries])
        labels = torch.tensor([e.label.y for e in entries], dtype=torch.float32)
        masks = None
        if with_masks:
            masks = torch.from_numpy(np.stack([load_label_map(manifest.path(e.mask)) for e in entries]))
        yield Batch(torch.from_numpy(images).permute(0, 3, 1, 2).contiguous(), labels, masks, idx)
