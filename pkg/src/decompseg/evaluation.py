"""Inference, segmentation metrics and overlay figures."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from decompseg.data import DatasetManifest, load_batches, to_uint8
from decompseg.errors import InputError
from decompseg.models import Classifier, MaskNet, Segmenter, load_classifier, load_segmenter, read_manifest

OVERLAY_ALPHA = 0.5
# foreground colors in class order; background is never tinted
PALETTE = np.array([
    [1.0, 0.0, 0.0], [0.0, 0.4, 1.0], [0.0, 0.9, 0.2], [1.0, 0.8, 0.0],
    [0.8, 0.0, 1.0], [0.0, 0.9, 0.9], [1.0, 0.5, 0.0], [0.5, 0.3, 0.1],
])


@torch.no_grad()
def predict_mask(f_m: MaskNet, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard label map ``(B, H, W)`` and mask stack ``(B, K, H, W)``; ties go to the lowest class."""
    depth = len(f_m.encoder.blocks)
    h, w = image.shape[-2:]
    if h % 2**depth or w % 2**depth:
        raise InputError(f"input {h}x{w} is not divisible by {2 ** depth}")
    m = torch.softmax(f_m(image), dim=1)
    return hard_labels(m), m


def hard_labels(m: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index
    return m.argmax(dim=1)


@dataclass
class SegMetrics:
    per_class_iou: np.ndarray   # NaN where a class is absent from both maps
    mean_iou: float
    pixel_accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    confusion: np.ndarray       # rows: truth, columns: prediction

    def to_dict(self) -> dict:
        clean = lambda a: [None if np.isnan(v) else float(v) for v in a]
        return {
            "per_class_iou": clean(self.per_class_iou),
            "mean_iou": self.mean_iou,
            "pixel_accuracy": self.pixel_accuracy,
            "precision": clean(self.precision),
            "recall": clean(self.recall),
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, k: int) -> np.ndarray:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise InputError(f"prediction {pred.shape} vs truth {truth.shape}")
    for name, a in (("prediction", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= k):
            raise InputError(f"{name} labels outside [0, {k})")
    idx = truth.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=k * k).reshape(k, k)


def compute_metrics(pred, truth, k: int) -> SegMetrics:
    """IoU, precision and recall per class from the confusion matrix.

    ``mean_iou`` averages only classes that occur in the prediction or the truth.
    """
    cm = confusion_matrix(pred, truth, k)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(tp + fp + fn > 0, tp / (tp + fp + fn), np.nan)
        precision = np.where(tp + fp > 0, tp / (tp + fp), np.nan)
        recall = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
    present = ~np.isnan(iou)
    mean_iou = float(iou[present].mean()) if present.any() else float("nan")
    total = cm.sum()
    acc = float(tp.sum() / total) if total else float("nan")
    return SegMetrics(iou, mean_iou, acc, precision, recall, cm)


def class_colors(k: int) -> np.ndarray:
    fg = k - 1
    reps = int(np.ceil(fg / len(PALETTE)))
    return np.tile(PALETTE, (reps, 1))[:fg]


def overlay(image: np.ndarray, labels: np.ndarray, k: int, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend class colors into an ``(H, W, 3)`` image; background pixels are returned unchanged."""
    out = image.copy()
    colors = class_colors(k)
    for c in range(k - 1):
        sel = labels == c
        out[sel] = alpha * colors[c] + (1 - alpha) * image[sel]
    return out


def _tile(tiles: list, rows: int, cols: int, pad: int) -> np.ndarray:
    h, w, _ = tiles[0].shape
    grid = np.ones((rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad, 3), dtype=tiles[0].dtype)
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        grid[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = t
    return grid


def render_overlay_grid(
    images,
    label_maps,
    n: int,
    layout: tuple[int, int] | None = None,
    seed: int = 0,
    num_classes: int = 2,
    alpha: float = OVERLAY_ALPHA,
    pad: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Inputs grid and overlay grid over ``n`` samples drawn without replacement under ``seed``.

    ``images`` is ``(N, 3, H, W)`` or ``(N, H, W, 3)`` in [0, 1]. Grids are float
    ``(rows*H, cols*W, 3)`` arrays; the inputs grid copies source pixels exactly.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4 and images.shape[1] == 3 and images.shape[-1] != 3:
        images = images.transpose(0, 2, 3, 1)
    label_maps = np.asarray(label_maps)
    if n < 1 or len(images) == 0:
        raise InputError("nothing to render")
    if n > len(images):
        raise InputError(f"asked for {n} samples, only {len(images)} available")
    if layout is None:
        cols = min(n, 10)
        layout = (int(np.ceil(n / cols)), cols)
    rows, cols = layout
    if rows * cols < n:
        raise InputError(f"layout {layout} cannot hold {n} samples")
    pick = np.sort(np.random.default_rng(seed).choice(len(images), n, replace=False))
    inputs = [images[i] for i in pick]
    overlays = [overlay(images[i], label_maps[i], num_classes, alpha) for i in pick]
    return _tile(inputs, rows, cols, pad), _tile(overlays, rows, cols, pad)


def save_figure(grid: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(grid)).save(path)
    return path


@torch.no_grad()
def run_inference(seg: Segmenter, g: Classifier | None, manifest: DatasetManifest, batch_size: int = 32,
                  device: str = "cpu") -> dict:
    """Images, hard labels, foreground areas, tag predictions and truths for a whole manifest."""
    seg.eval()
    out = {"images": [], "pred": [], "truth": [], "labels": [], "z": []}
    for batch in load_batches(manifest, batch_size):
        images = batch.images.to(device)
        labels, _ = predict_mask(seg.f_m, images)
        out["images"].append(batch.images.numpy())
        out["pred"].append(labels.cpu().numpy())
        out["labels"].append(batch.labels.numpy())
        if batch.masks is not None:
            out["truth"].append(batch.masks.numpy())
        if g is not None:
            out["z"].append(g(images).cpu().numpy())
    return {k: np.concatenate(v) if v else None for k, v in out.items()}


def false_positive_rate(pred: np.ndarray, num_classes: int, threshold: float = 0.01) -> float:
    """Fraction of images whose predicted foreground covers more than ``threshold`` of the pixels."""
    fg_area = (pred != num_classes - 1).reshape(len(pred), -1).mean(axis=1)
    return float((fg_area > threshold).mean()) if len(pred) else float("nan")


def evaluate_run(
    checkpoint: str | Path,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    run_id: str = "run",
    seed: int = 0,
    n_figure: int = 50,
    fp_threshold: float = 0.01,
    device: str = "cpu",
) -> dict:
    """Metrics report plus present/absent overlay grids for one checkpoint and manifest.

    Without ground-truth masks the report is flagged partial and only tag-level
    statistics are filled in.
    """
    seg = load_segmenter(checkpoint).to(device)
    g = load_classifier(checkpoint).to(device) if "classifier" in read_manifest(checkpoint) else None
    res = run_inference(seg, g, manifest, device=device)
    k = manifest.num_classes
    pred, labels = res["pred"], res["labels"]
    fg_present = labels[:, :-1].max(axis=1) > 0
    fg_area = (pred != k - 1).reshape(len(pred), -1).mean(axis=1)

    report = {
        "run_id": run_id,
        "split": manifest.split,
        "num_images": int(len(pred)),
        "num_classes": k,
        "partial": res["truth"] is None,
        "missing": [] if res["truth"] is not None else ["segmentation metrics (no ground-truth masks)"],
        "present": {"count": int(fg_present.sum()),
                    "mean_fg_area": float(fg_area[fg_present].mean()) if fg_present.any() else None},
        "absent": {"count": int((~fg_present).sum()),
                   "mean_fg_area": float(fg_area[~fg_present].mean()) if (~fg_present).any() else None,
                   "false_positive_rate": false_positive_rate(pred[~fg_present], k, fp_threshold)
                   if (~fg_present).any() else None,
                   "fp_threshold": fp_threshold},
    }
    # tag-level prediction from mean mask scores: class present when it wins any pixel
    y_hat_tags = np.stack([(pred == c).reshape(len(pred), -1).any(axis=1) for c in range(k - 1)], axis=1)
    report["mask_tag_accuracy"] = float((y_hat_tags == (labels[:, :-1] > 0)).all(axis=1).mean())
    if res["z"] is not None:
        report["classifier_tag_accuracy"] = float(((res["z"] > 0.5) == (labels[:, :-1] > 0)).all(axis=1).mean())
    if res["truth"] is not None:
        metrics = compute_metrics(pred, res["truth"], k)
        report["segmentation"] = metrics.to_dict()
        report["fg_iou"] = float(np.nanmean(metrics.per_class_iou[:-1]))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        figures = {}
        for name, sel in (("present", fg_present), ("absent", ~fg_present)):
            idx = np.flatnonzero(sel)
            if not len(idx):
                continue
            n = min(n_figure, len(idx))
            cols = min(n, 10)
            grids = render_overlay_grid(res["images"][idx], pred[idx], n, (int(np.ceil(n / cols)), cols),
                                        seed=seed, num_classes=k)
            for kind, grid in zip(("inputs", "overlay"), grids):
                path = save_figure(grid, out_dir / f"{run_id}_{manifest.split}_{name}_{kind}.png")
                figures[f"{name}_{kind}"] = path.name
        report["figures"] = figures
        (out_dir / f"{run_id}_{manifest.split}_metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        (out_dir / f"{run_id}_{manifest.split}_metrics.txt").write_text(format_report(report))
    return report


def format_report(report: dict) -> str:
    lines = [f"run {report['run_id']}  split {report['split']}  images {report['num_images']}"]
    if report.get("partial"):
        lines.append("PARTIAL REPORT: " + "; ".join(report["missing"]))
    seg = report.get("segmentation")
    if seg:
        lines.append(f"mean IoU {seg['mean_iou']:.4f}  pixel accuracy {seg['pixel_accuracy']:.4f}")
        lines.append(f"{'class':<12}{'IoU':>8}{'precision':>11}{'recall':>8}")
        k = report["num_classes"]
        for c in range(k):
            name = "background" if c == k - 1 else f"class {c}"
            fmt = lambda v: "   n/a" if v is None else f"{v:.4f}"
            lines.append(f"{name:<12}{fmt(seg['per_class_iou'][c]):>8}{fmt(seg['precision'][c]):>11}"
                         f"{fmt(seg['recall'][c]):>8}")
    a = report["absent"]
    if a["count"]:
        lines.append(f"absent population: mean fg area {a['mean_fg_area']:.4f}, "
                     f"false-positive rate {a['false_positive_rate']:.4f} (> {a['fp_threshold']:.0%} of pixels)")
    if "classifier_tag_accuracy" in report:
        lines.append(f"classifier tag accuracy {report['classifier_tag_accuracy']:.4f}")
    return "\n".join(lines) + "\n"
