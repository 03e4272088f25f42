"""Two-stage training: the guidance classifier first, then the segmenter with it frozen."""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from decompseg.core import LossWeights
from decompseg.data import DatasetManifest, load_batches
from decompseg.errors import ConfigurationError, InputError, NumericError, ResourceError, SpecMismatchError
from decompseg.losses import loss_classifier, loss_total
from decompseg.models import (
    Classifier,
    ModelSpec,
    Segmenter,
    checksum,
    forward_pair,
    load_classifier,
    load_segmenter,
    read_manifest,
    save_checkpoint,
    spec_diff,
)

log = logging.getLogger(__name__)

STATE_FILE = "train_state.pt"


@dataclass
class TrainConfig:
    stage: str = "joint"
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    lambda_m: float = 1e-3
    lambda_c: float = 1e-3
    seed: int = 0
    checkpoint_dir: str | None = None
    eval_every: int = 0
    device: str = "cpu"
    deterministic: bool = True
    max_steps: int | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.stage not in ("classifier", "joint"):
            raise InputError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch size must be >= 1")
        if self.learning_rate <= 0:
            raise InputError("learning rate must be positive")
        if not all(0 <= b < 1 for b in self.adam_betas):
            raise InputError(f"Adam betas must lie in [0, 1), got {self.adam_betas}")
        if self.lambda_m < 0 or self.lambda_c < 0:
            raise InputError("loss weights must be nonnegative")

    @classmethod
    def paper(cls, stage: str, **overrides) -> "TrainConfig":
        """Published defaults: Adam(1e-4, (0.9, 0.999)), 10 epochs, batch 32 / 4, both weights 1e-3."""
        batch = 32 if stage == "classifier" else 4
        return cls(stage=stage, batch_size=batch, **overrides)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_m, self.lambda_c)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


class RunLog:
    """Append-only training records, mirrored to a JSON-lines file when ``path`` is set."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self._last_step: int | None = None
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        if record.get("kind", "step") == "step":
            if self._last_step is not None and record["step"] <= self._last_step:
                raise InputError(f"step {record['step']} does not follow {self._last_step}")
            self._last_step = record["step"]
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def steps(self) -> list[dict]:
        return [r for r in self.records if r.get("kind", "step") == "step"]

    def comparable(self) -> list[dict]:
        """Records without wall-clock fields, for run-to-run comparison."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    @classmethod
    def load(cls, path: str | Path) -> "RunLog":
        rl = cls()
        rl.records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        steps = [r["step"] for r in rl.steps()]
        rl._last_step = steps[-1] if steps else None
        return rl


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return math.sqrt(float(torch.stack(sq).sum())) if sq else 0.0


def _snapshot(cfg: TrainConfig, info: dict) -> None:
    if cfg.checkpoint_dir:
        path = Path(cfg.checkpoint_dir) / "diagnostic.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(info, indent=2, sort_keys=True))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# ---------------------------------------------------------------------------
# classifier stage


@torch.no_grad()
def tag_accuracy(g: Classifier, manifest: DatasetManifest, batch_size: int = 64, device="cpu") -> float:
    was_training = g.training
    g.eval()
    correct = total = 0
    for batch in load_batches(manifest, batch_size):
        z = g(batch.images.to(device))
        target = batch.labels[:, :-1].to(device) > 0.5
        correct += int(((z > 0.5) == target).all(dim=1).sum())
        total += len(batch.indices)
    g.train(was_training)
    return correct / max(total, 1)


def train_classifier(
    g: Classifier,
    train_manifest: DatasetManifest,
    cfg: TrainConfig,
    val_manifest: DatasetManifest | None = None,
    runlog: RunLog | None = None,
) -> tuple[Classifier, RunLog]:
    """Fit the tag classifier with Adam under the summed binary cross-entropy."""
    if cfg.stage != "classifier":
        raise ConfigurationError(f"train_classifier needs stage 'classifier', got {cfg.stage!r}")
    if g.frozen:
        raise ConfigurationError("cannot train a frozen classifier")
    if train_manifest.num_classes != g.num_classes:
        raise ConfigurationError(f"manifest has K={train_manifest.num_classes}, classifier K={g.num_classes}")
    seed_everything(cfg.seed, cfg.deterministic)
    runlog = runlog or RunLog(Path(cfg.checkpoint_dir) / "runlog.jsonl" if cfg.checkpoint_dir else None)
    g.to(cfg.device).train()
    opt = make_optimizer(g, cfg)
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        for batch in load_batches(train_manifest, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
            images, labels = batch.images.to(cfg.device), batch.labels.to(cfg.device)
            z = g(images)
            loss = loss_classifier(z, labels)
            if not torch.isfinite(loss):
                _snapshot(cfg, {"stage": "classifier", "step": step, "indices": batch.indices})
                raise NumericError(f"classifier loss is {loss.item()} at step {step}, batch {batch.indices}")
            opt.zero_grad()
            loss.backward()
            gn = _grad_norm(g.parameters())
            opt.step()
            step += 1
            acc = float(((z.detach() > 0.5) == (labels[:, :-1] > 0.5)).all(dim=1).float().mean())
            runlog.append({"kind": "step", "stage": "classifier", "step": step, "epoch": epoch,
                           "loss": loss.item(), "batch_accuracy": acc, "grad_norm": gn,
                           "wall_time": time.perf_counter() - t0})
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        summary = {"kind": "epoch", "stage": "classifier", "step": step, "epoch": epoch}
        if val_manifest is not None:
            summary["val_accuracy"] = tag_accuracy(g, val_manifest, device=cfg.device)
        runlog.append(summary)
        log.info("classifier epoch %d: %s", epoch, summary)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    g.eval()
    if cfg.checkpoint_dir:
        save_checkpoint(cfg.checkpoint_dir, classifier=g, extra={"train_config": cfg.to_dict()})
    return g, runlog


# ---------------------------------------------------------------------------
# joint stage


@dataclass
class TrainingState:
    seg: Segmenter
    classifier: Classifier | None
    optimizer: torch.optim.Optimizer
    step: int = 0
    best_val: float = math.inf
    config: dict = field(default_factory=dict)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    """Adam over a module's parameters (or an explicit parameter list)."""
    # Segmenter.parameters() lists the shared encoder once; the classifier is not included.
    if isinstance(params, torch.nn.Module):
        params = params.parameters()
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas)


def save_training_state(path: str | Path, state: TrainingState, cfg: TrainConfig) -> Path:
    path = Path(path)
    save_checkpoint(path, state.seg, state.classifier,
                    extra={"train_config": cfg.to_dict(), "step": state.step})
    torch.save({
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "best_val": state.best_val,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": np.random.get_state(),
        "python_rng": random.getstate(),
    }, path / STATE_FILE)
    return path


def resume(checkpoint_dir: str | Path, cfg: TrainConfig, spec: ModelSpec | None = None,
           runlog: RunLog | None = None) -> TrainingState:
    """Restore weights, optimizer moments, step counter and RNG state from a checkpoint.

    A different model spec is refused; changed loss weights are accepted and
    recorded in ``runlog`` as a config change.
    """
    path = Path(checkpoint_dir)
    manifest = read_manifest(path)
    if not (path / STATE_FILE).exists():
        raise ResourceError(f"{path} has no training state")
    if spec is not None:
        stored = ModelSpec.from_dict(manifest["model_spec"])
        diff = spec_diff(stored, spec)
        if diff:
            raise SpecMismatchError(f"checkpoint spec differs in {sorted(diff)}", diff)
    seg = load_segmenter(path).to(cfg.device)
    g = load_classifier(path).to(cfg.device) if "classifier" in manifest else None
    opt = make_optimizer(seg, cfg)
    blob = torch.load(path / STATE_FILE, weights_only=False)
    opt.load_state_dict(blob["optimizer"])
    for group in opt.param_groups:
        group["lr"] = cfg.learning_rate
        group["betas"] = cfg.adam_betas
    torch.set_rng_state(blob["torch_rng"])
    np.random.set_state(blob["numpy_rng"])
    random.setstate(blob["python_rng"])
    old = manifest.get("train_config", {})
    changed = {k: (old.get(k), v) for k, v in cfg.to_dict().items()
               if k in ("lambda_m", "lambda_c", "learning_rate", "adam_betas") and old.get(k) != v}
    if changed:
        log.info("resuming with changed settings: %s", changed)
        if runlog is not None:
            runlog.append({"kind": "config_change", "step": blob["step"], "changes": changed})
    return TrainingState(seg, g, opt, blob["step"], blob["best_val"], old)


@torch.no_grad()
def validate_joint(seg: Segmenter, g: Classifier | None, manifest: DatasetManifest, cfg: TrainConfig,
                   batch_size: int = 16) -> dict:
    from decompseg.evaluation import compute_metrics

    w = cfg.weights
    sums = {"recon": 0.0, "mask": 0.0, "cls": 0.0, "total": 0.0}
    n = 0
    preds, truths, absent_area = [], [], []
    guide = g if w.lambda_c else None
    for batch in load_batches(manifest, batch_size):
        images = batch.images.to(cfg.device)
        m, x = forward_pair(seg.f_m, seg.f_x, images)
        rep = loss_total(m, x, images, batch.labels.to(cfg.device), guide, w)
        b = len(batch.indices)
        for key in sums:
            sums[key] += float(getattr(rep, key)) * b
        n += b
        labels = m.argmax(dim=1)
        absent = batch.labels[:, :-1].sum(dim=1) == 0
        if absent.any():
            absent_area += (labels[absent] != manifest.num_classes - 1).float().mean(dim=(1, 2)).tolist()
        if batch.masks is not None:
            preds.append(labels.cpu().numpy())
            truths.append(batch.masks.numpy())
    out = {f"val_{k}": v / n for k, v in sums.items()}
    if absent_area:
        out["val_absent_fg_area"] = float(np.mean(absent_area))
    if preds:
        metrics = compute_metrics(np.concatenate(preds), np.concatenate(truths), manifest.num_classes)
        out["val_mean_iou"] = metrics.mean_iou
        out["val_fg_iou"] = float(np.nanmean(metrics.per_class_iou[:-1]))
    return out


def train_joint(
    seg: Segmenter,
    g: Classifier | None,
    train_manifest: DatasetManifest,
    cfg: TrainConfig,
    val_manifest: DatasetManifest | None = None,
    state: TrainingState | None = None,
    runlog: RunLog | None = None,
) -> tuple[Segmenter, RunLog]:
    """Jointly fit the mask and decomposition networks with the classifier frozen.

    Pass ``state`` (from :func:`resume`) to continue an interrupted run; the
    batch order is a function of ``(seed, epoch)`` so the continuation matches
    an uninterrupted run.
    """
    if cfg.stage != "joint":
        raise ConfigurationError(f"train_joint needs stage 'joint', got {cfg.stage!r}")
    if state is not None and g is None:
        g = state.classifier
    if g is None and cfg.lambda_c:
        raise ConfigurationError("train-classifier must run first: joint training needs a trained classifier")
    if train_manifest.num_classes != seg.spec.num_classes:
        raise ConfigurationError(f"manifest has K={train_manifest.num_classes}, model K={seg.spec.num_classes}")
    if state is None:
        seed_everything(cfg.seed, cfg.deterministic)
        state = TrainingState(seg, g, make_optimizer(seg, cfg))
    else:
        torch.use_deterministic_algorithms(cfg.deterministic)
        seg = state.seg
        state.classifier = g
    runlog = runlog or RunLog(Path(cfg.checkpoint_dir) / "runlog.jsonl" if cfg.checkpoint_dir else None)
    seg.to(cfg.device).train()
    if g is not None:
        g.to(cfg.device).freeze()
    g_sum = checksum(g) if g is not None else None
    w = cfg.weights
    guide = g if w.lambda_c else None
    opt = state.optimizer
    per_epoch = steps_per_epoch(len(train_manifest), cfg.batch_size)
    total_steps = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    t0 = time.perf_counter()

    while state.step < total_steps:
        epoch, skip = divmod(state.step, per_epoch)
        for batch in load_batches(train_manifest, cfg.batch_size, shuffle=True, seed=cfg.seed,
                                  epoch=epoch, skip=skip):
            images, labels = batch.images.to(cfg.device), batch.labels.to(cfg.device)
            m, x = forward_pair(seg.f_m, seg.f_x, images)
            rep = loss_total(m, x, images, labels, guide, w)
            if not all(math.isfinite(v.item()) for v in (rep.recon, rep.mask, rep.cls)):
                info = {"stage": "joint", "step": state.step, "indices": batch.indices,
                        "losses": {k: getattr(rep, k).item() for k in ("recon", "mask", "cls")}}
                _snapshot(cfg, info)
                raise NumericError(f"non-finite loss at step {state.step}, manifest indices {batch.indices}")
            opt.zero_grad()
            rep.total.backward()
            gn = _grad_norm(seg.parameters())
            opt.step()
            state.step += 1
            runlog.append({"kind": "step", "stage": "joint", "step": state.step, "epoch": epoch,
                           **rep.as_dict(), "grad_norm": gn, "wall_time": time.perf_counter() - t0})
            if cfg.eval_every and val_manifest is not None and state.step % cfg.eval_every == 0:
                runlog.append({"kind": "eval", "step": state.step, **validate_joint(seg, g, val_manifest, cfg)})
                seg.train()
            if cfg.checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_training_state(Path(cfg.checkpoint_dir) / "last", state, cfg)
            if state.step >= total_steps:
                break
        if state.step % per_epoch == 0 or state.step >= total_steps:
            summary = {"kind": "epoch", "stage": "joint", "step": state.step, "epoch": epoch}
            if val_manifest is not None:
                summary.update(validate_joint(seg, g, val_manifest, cfg))
                seg.train()
            runlog.append(summary)
            log.info("joint epoch %d: %s", epoch, summary)
            if cfg.checkpoint_dir:
                save_training_state(Path(cfg.checkpoint_dir) / "last", state, cfg)
                val_total = summary.get("val_total")
                if val_total is not None and val_total < state.best_val:
                    state.best_val = val_total
                    save_training_state(Path(cfg.checkpoint_dir) / "best", state, cfg)

    if g is not None and checksum(g) != g_sum:
        raise ConfigurationError("classifier parameters changed during joint training")
    seg.eval()
    return seg, runlog


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
