"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line.

The desk-scale end-to-end run (criterion 5) trains the classifier and the
segmenter on 2,000 synthetic 64x64 scenes with the published optimizer
settings, which takes roughly 15-25 minutes on one CPU core. Set
``DECOMPSEG_ACCEPTANCE_DIR`` to keep its artifacts between sessions: a
finished run found there is reused instead of retrained.
"""

import itertools
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from decompseg import LossWeights, average_mask_score, component_images, loss_classifier, loss_cls, loss_mask, \
    loss_recon, loss_total, recompose
from decompseg.cli import main as cli
from decompseg.evaluation import OVERLAY_ALPHA, class_colors, compute_metrics, render_overlay_grid

from conftest import FixedScores, StubClassifier, analytic_gradient, central_difference, max_relative_error


@pytest.fixture
def report(capsys):
    """Print one verdict line per criterion, visible even under output capture."""

    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return emit


# ---------------------------------------------------------------------------
# 1. architecture parameter counts


def test_1_architecture_parameter_counts(report, tmp_path):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "decompseg.cli", "check-arch", "--scale", "paper", "--json",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    out = json.loads(proc.stdout)
    rows = out["rows"]
    final = [r for r in rows if r["part"] == "decoder_x"][-1]
    ok = (proc.returncode == 0
          and out["summary"]["encoder"] == 9_404_992
          and out["summary"]["decoder_x"] == 12_576_070
          and out["reference_diff"] == []
          and all(r["declared_params"] == r["actual_params"] for r in rows)
          and final["actual_params"] == 3_462
          and elapsed < 10)
    report(1, "architecture parameter counts", ok,
           f"encoder {out['summary']['encoder']:,}, f_x decoder {out['summary']['decoder_x']:,}, "
           f"final conv {final['actual_params']:,}, {len(out['reference_diff'])} diffs, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient verification


def _gradient_errors(k, seed):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, k, 4, 4, generator=gen, dtype=torch.float64)
    x = torch.randn(2, k, 3, 4, 4, generator=gen, dtype=torch.float64)
    image = torch.rand(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    y = torch.ones(2, k, dtype=torch.float64)
    y[0, 0] = 0
    g = StubClassifier(k - 1, seed=seed)
    m = lambda lg: torch.softmax(lg, 1)
    cases = {
        "loss_recon": (lambda lg: loss_recon(recompose(m(lg), x), image), logits),
        "loss_mask": (lambda lg: loss_mask(average_mask_score(m(lg)), y), logits),
        "loss_cls/mask": (lambda lg: loss_cls(m(lg), x, y, g), logits),
        "loss_cls/image-lets": (lambda xx: loss_cls(m(logits), xx, y, g), x),
        "loss_classifier": (lambda z: loss_classifier(torch.sigmoid(z), y), torch.randn(2, k - 1, generator=gen,
                                                                                         dtype=torch.float64)),
        "loss_total": (lambda lg: loss_total(m(lg), x, image, y, g, LossWeights(1e-3, 1e-3)).total, logits),
    }
    return {name: max_relative_error(analytic_gradient(f, at), central_difference(f, at, 1e-5))
            for name, (f, at) in cases.items()}


def test_2_gradient_verification(report):
    t0 = time.perf_counter()
    worst = {}
    for k, seed in itertools.product((2, 3), range(3)):
        for name, err in _gradient_errors(k, seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    ok = all(err < 1e-4 for err in worst.values()) and elapsed < 60
    detail = ", ".join(f"{n} {e:.1e}" for n, e in worst.items())
    report(2, "gradient verification", ok, f"max rel. error: {detail}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. core math oracle equivalence


def _oracle_errors(seed):
    rng = np.random.default_rng(seed)
    b, k, c, h, w = 2, 3, 3, 3, 3
    m = rng.random((b, k, h, w))
    m /= m.sum(axis=1, keepdims=True)
    x = rng.normal(size=(b, k, c, h, w))
    comp, rec, score = np.zeros(x.shape), np.zeros((b, c, h, w)), np.zeros((b, k))
    for bi, ki, ci, hi, wi in itertools.product(range(b), range(k), range(c), range(h), range(w)):
        comp[bi, ki, ci, hi, wi] = m[bi, ki, hi, wi] * x[bi, ki, ci, hi, wi]
        rec[bi, ci, hi, wi] += m[bi, ki, hi, wi] * x[bi, ki, ci, hi, wi]
    for bi, ki in itertools.product(range(b), range(k)):
        score[bi, ki] = sum(m[bi, ki, hi, wi] for hi in range(h) for wi in range(w)) / (h * w)
    mt, xt = torch.from_numpy(m), torch.from_numpy(x)
    return max(np.abs(component_images(mt, xt).numpy() - comp).max(),
               np.abs(recompose(mt, xt).numpy() - rec).max(),
               np.abs(average_mask_score(mt).numpy() - score).max())


def _pixel_counts(pred, truth):
    tp, fp, fn = [0, 0], [0, 0], [0, 0]
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if p == t:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    return tp, fp, fn


def test_3_core_math_oracles(report):
    t0 = time.perf_counter()
    tensor_err = max(_oracle_errors(seed) for seed in range(20))
    codes = np.arange(2 ** 16, dtype=np.uint32)
    masks = ((codes[:, None] >> np.arange(16)) & 1).astype(np.int64).reshape(-1, 4, 4)
    partner = masks[((codes * 40503) + 12345) & 0xFFFF]  # a bijection of the 2^16 masks
    truths = [np.zeros((4, 4), int), np.ones((4, 4), int), np.indices((4, 4)).sum(0) % 2]
    mismatches = checked = 0
    pairs = itertools.chain(zip(masks, partner), ((p, t) for t in truths for p in masks))
    for pred, truth in pairs:
        cm = compute_metrics(pred, truth, 2).confusion
        tp, fp, fn = _pixel_counts(pred, truth)
        got = ([cm[i, i] for i in range(2)], [cm[:, i].sum() - cm[i, i] for i in range(2)],
               [cm[i, :].sum() - cm[i, i] for i in range(2)])
        mismatches += got != (tp, fp, fn)
        checked += 1
    elapsed = time.perf_counter() - t0
    ok = tensor_err <= 1e-12 and mismatches == 0 and elapsed < 120
    report(3, "core math oracle equivalence", ok,
           f"tensor ops max |diff| {tensor_err:.1e}; metrics {checked:,} mask pairs, {mismatches} mismatches; "
           f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. hand-computed loss values


def test_4_hand_computed_losses(report):
    d = torch.float64
    mask = loss_mask(torch.tensor([[0.5, 0.5]], dtype=d), torch.tensor([[1.0, 1.0]], dtype=d)).item()
    recon = loss_recon(torch.ones(1, 3, 2, 2, dtype=d), torch.zeros(1, 3, 2, 2, dtype=d)).item()
    cls = loss_cls(torch.full((1, 2, 2, 2), 0.5, dtype=d), torch.rand(1, 2, 3, 2, 2, dtype=d),
                   torch.tensor([[1.0, 1.0]], dtype=d), FixedScores([[0.9], [0.1]])).item()
    clf = loss_classifier(torch.tensor([[0.8, 0.3]], dtype=d), torch.tensor([[1.0, 0.0, 1.0]], dtype=d)).item()
    expected = {"mask": (mask, 0.693147), "recon": (recon, 1.0), "cls": (cls, 0.105361),
                "classifier": (clf, 0.579818)}
    ok = all(abs(got - want) <= 1e-6 for got, want in expected.values())
    report(4, "hand-computed loss values", ok,
           ", ".join(f"{n} {got:.6f} (want {want})" for n, (got, want) in expected.items()))


# ---------------------------------------------------------------------------
# 5. desk-scale end-to-end


def _desk_run_dir(tmp_path_factory) -> Path:
    keep = os.environ.get("DECOMPSEG_ACCEPTANCE_DIR")
    return Path(keep) if keep else tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = _desk_run_dir(tmp_path_factory)
    done = root / "summary.json"
    if done.exists():
        return json.loads(done.read_text())
    t0 = time.perf_counter()
    data = root / "data"
    assert cli(["gen-synth", "--n", "2000", "--size", "64", "--classes", "1", "--seed", "7",
                "--out", str(data)]) == 0
    assert cli(["train-classifier", "--train", str(data / "train.jsonl"), "--val", str(data / "val.jsonl"),
                "--out", str(root / "classifier")]) == 0
    # the untrained baseline: seeded initialization, zero steps, same evaluation path
    from decompseg.data import DatasetManifest
    from decompseg.evaluation import evaluate_run
    from decompseg.models import build_segmenter, desk_spec, load_classifier, save_checkpoint

    val = DatasetManifest.load(data / "val.jsonl")
    baselines = {}
    # the default start (background prior) and, for reference, uniform initial masks
    for name, prior in (("untrained", None), ("untrained_uniform", 0.0)):
        torch.manual_seed(0)
        seg = build_segmenter(desk_spec(2)) if prior is None else build_segmenter(desk_spec(2), background_prior=prior)
        save_checkpoint(root / name, seg, load_classifier(root / "classifier"))
        baselines[name] = evaluate_run(root / name, val, root / f"eval_{name}", run_id=name)["fg_iou"]
    assert cli(["train", "--train", str(data / "train.jsonl"), "--val", str(data / "val.jsonl"),
                "--classifier", str(root / "classifier"), "--scale", "desk", "--out", str(root / "joint")]) == 0
    trained = evaluate_run(root / "joint" / "last", val, root / "eval_trained", run_id="trained")
    summary = {
        "classifier_val_accuracy": trained["classifier_tag_accuracy"],
        "baseline_fg_iou": baselines["untrained"],
        "baseline_uniform_fg_iou": baselines["untrained_uniform"],
        "trained_fg_iou": trained["fg_iou"],
        "absent_mean_fg_area": trained["absent"]["mean_fg_area"],
        "absent_false_positive_rate": trained["absent"]["false_positive_rate"],
        "present_mean_fg_area": trained["present"]["mean_fg_area"],
        "minutes": (time.perf_counter() - t0) / 60,
    }
    done.write_text(json.dumps(summary, indent=2))
    return summary


@pytest.mark.slow
def test_5a_classifier_accuracy(report, desk_run):
    acc = desk_run["classifier_val_accuracy"]
    report("5a", "desk classifier validation tag accuracy >= 0.9", acc >= 0.9, f"{acc:.4f}")


@pytest.mark.slow
def test_5b_foreground_iou(report, desk_run):
    base, trained = desk_run["baseline_fg_iou"], desk_run["trained_fg_iou"]
    report("5b", "desk foreground IoU >= 0.5 trained, <= 0.3 untrained", trained >= 0.5 and base <= 0.3,
           f"trained {trained:.4f}, untrained {base:.4f} "
           f"(uniform-mask start {desk_run['baseline_uniform_fg_iou']:.4f})")


@pytest.mark.slow
def test_5c_absent_foreground_area(report, desk_run):
    area = desk_run["absent_mean_fg_area"]
    report("5c", "desk mean predicted foreground area on absent images <= 5%", area <= 0.05,
           f"{area:.2%} (false-positive rate {desk_run['absent_false_positive_rate']:.2f}); "
           f"run took {desk_run['minutes']:.1f} min")


# ---------------------------------------------------------------------------
# 6. training contracts


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    from decompseg.data import SyntheticSceneParams, generate_synthetic

    root = tmp_path_factory.mktemp("contracts")
    return generate_synthetic(SyntheticSceneParams(canvas_size=(16, 16)), 12, 5, root / "data"), root


def test_6_training_contracts(report, small_data):
    from decompseg.models import build_classifier, build_segmenter, checksum, unet_spec
    from decompseg.training import RunLog, TrainConfig, resume, train_classifier, train_joint

    manifest, root = small_data
    spec = unet_spec(2, 16, widths=(4, 4, 8, 8), bottleneck=8)
    torch.manual_seed(0)
    g, _ = train_classifier(build_classifier(2, width=8), manifest,
                            TrainConfig(stage="classifier", epochs=1, batch_size=8))
    g.freeze()
    before = checksum(g)

    def fresh():
        torch.manual_seed(1)
        return build_segmenter(spec)

    cfg = lambda d, **kw: TrainConfig(stage="joint", epochs=2, batch_size=4, checkpoint_dir=str(root / d), **kw)
    seg_a, log_a = train_joint(fresh(), g, manifest, cfg("a"))
    _, log_b = train_joint(fresh(), g, manifest, cfg("b"))
    frozen = checksum(g) == before
    strip = lambda rl: [{k: v for k, v in r.items() if k != "wall_time"} for r in rl.steps()]
    identical = strip(log_a) == strip(log_b) and len(log_a.steps()) == 6

    worst = 0.0
    for r in log_a.steps():
        expect = r["recon"] + r["lambda_m"] * r["mask"] + r["lambda_c"] * r["cls"]
        worst = max(worst, abs(r["total"] - expect) / abs(expect))

    train_joint(fresh(), g, manifest, cfg("c", max_steps=4))
    runlog = RunLog.load(root / "c" / "runlog.jsonl")
    state = resume(root / "c" / "last", cfg("c"), spec, runlog)
    seg_c, log_c = train_joint(state.seg, None, manifest, cfg("c"), state=state, runlog=runlog)
    resumed = strip(log_c) == strip(log_a) and all(
        torch.equal(p, q) for p, q in zip(seg_a.state_dict().values(), seg_c.state_dict().values()))

    ok = frozen and identical and worst <= 1e-9 and resumed
    report(6, "training contracts", ok,
           f"classifier frozen {frozen}, seeded runs identical {identical}, identity max rel. {worst:.1e}, "
           f"resume matches {resumed}")


# ---------------------------------------------------------------------------
# 7. figure pipeline


def test_7_figure_pipeline(report, small_data, tmp_path):
    from decompseg.models import build_classifier, build_segmenter, save_checkpoint, unet_spec

    manifest, _ = small_data
    torch.manual_seed(0)
    save_checkpoint(tmp_path / "ck", build_segmenter(unet_spec(2, 16, widths=(4, 4, 8, 8), bottleneck=8)),
                    build_classifier(2, width=8).freeze())
    args = ["eval", "--checkpoint", str(tmp_path / "ck"), "--manifest", str(manifest.path("all.jsonl")),
            "--seed", "3", "--n-figure", "6"]
    assert cli(args + ["--out", str(tmp_path / "e1")]) == 0
    assert cli(args + ["--out", str(tmp_path / "e2")]) == 0
    names = [f"run_all_{pop}_{kind}.png" for pop in ("present", "absent") for kind in ("inputs", "overlay")]
    produced = all((tmp_path / "e1" / n).exists() for n in names)
    identical = produced and all((tmp_path / "e1" / n).read_bytes() == (tmp_path / "e2" / n).read_bytes()
                                 for n in names)

    pixel = np.array([0.2, 0.4, 0.6])
    _, fg = render_overlay_grid(pixel.reshape(1, 3, 1, 1), np.array([[[0]]]), 1, (1, 1), num_classes=2)
    _, bg = render_overlay_grid(pixel.reshape(1, 3, 1, 1), np.array([[[1]]]), 1, (1, 1), num_classes=2)
    blend = OVERLAY_ALPHA * class_colors(2)[0] + (1 - OVERLAY_ALPHA) * pixel
    blend_err = max(np.abs(fg[0, 0] - blend).max(), np.abs(bg[0, 0] - pixel).max())

    ok = produced and identical and blend_err <= 1e-12
    report(7, "figure pipeline", ok,
           f"4 grids written {produced}, byte-identical reruns {identical}, 1x1 blend error {blend_err:.1e}")
