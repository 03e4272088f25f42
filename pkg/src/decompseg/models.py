"""Shared-encoder dual-decoder U-Net, the guidance classifier and checkpoint files.

The segmenter is described declaratively by a :class:`ModelSpec`; every layer
carries the parameter count and output shape it is expected to have, and
:func:`build_segmenter` refuses to return a network that disagrees with its
own description.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from decompseg.errors import ConfigurationError, InputError, ResourceError, SpecMismatchError

LEAKY_SLOPE = 0.01
BACKGROUND_PRIOR = 2.0  # initial mask-head logit margin for background

# Per-layer rows of the reference architecture at 224x224: (type, output shape, parameters).
PAPER_ENCODER_TABLE = [
    ("ConvBlock(c=64, k=3, s=1)", (64, 112, 112), 38_720),
    ("ConvBlock(c=128, k=3, s=1)", (128, 56, 56), 221_440),
    ("ConvBlock(c=256, k=3, s=1)", (256, 28, 28), 885_248),
    ("ConvBlock(c=512, k=3, s=1)", (512, 14, 14), 3_539_968),
    ("Conv(c=1024, k=3, s=1) + LeakyReLU", (1024, 14, 14), 4_719_616),
]
PAPER_ENCODER_TOTAL = 9_404_992
PAPER_DECODER_TABLE = [
    ("ConvBlock'(c=512, k=3, s=1)", (512, 28, 28), 9_438_208),
    ("ConvBlock'(c=256, k=3, s=1)", (256, 56, 56), 2_359_808),
    ("ConvBlock'(c=128, k=3, s=1)", (128, 112, 112), 590_080),
    ("ConvBlock'(c=64, k=3, s=1)", (64, 224, 224), 147_584),
    ("Conv(c=64, k=3, s=1) + LeakyReLU", (64, 224, 224), 36_928),
    ("Conv(c=C_out, k=3, s=1)", ("C_out", 224, 224), 3_462),
]
PAPER_DECODER_TOTAL = 12_576_070  # decomposition decoder, C_out = 3K = 6


def conv_params(c_in: int, c_out: int, kernel: int = 3) -> int:
    return c_out * c_in * kernel * kernel + c_out


@dataclass
class LayerSpec:
    kind: str
    out_channels: int
    kernel: int = 3
    stride: int = 1
    declared_params: int = 0
    declared_out_shape: tuple = ()
    name: str = ""

    def __post_init__(self):
        kinds = {"conv", "convblock", "convblock_up", "upsample", "maxpool", "leaky_relu", "linear"}
        if self.kind not in kinds:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        self.declared_out_shape = tuple(self.declared_out_shape)


@dataclass
class ModelSpec:
    num_classes: int
    input_size: tuple
    encoder: list
    decoder_mask: list
    decoder_x: list
    skip_wiring: dict = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        if self.num_classes < 2:
            raise ConfigurationError("a segmenter needs K >= 2 classes (foreground plus background)")
        self.encoder = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.encoder]
        self.decoder_mask = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.decoder_mask]
        self.decoder_x = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.decoder_x]
        self.skip_wiring = {int(k): int(v) for k, v in self.skip_wiring.items()}

    @property
    def depth(self) -> int:
        return sum(1 for l in self.encoder if l.kind == "convblock")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_wiring"] = {str(k): v for k, v in self.skip_wiring.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def unet_spec(
    num_classes: int,
    size: int | tuple = 224,
    widths: tuple = (64, 128, 256, 512),
    bottleneck: int = 1024,
    name: str = "custom",
    declared_encoder: list | None = None,
    declared_decoder: list | None = None,
) -> ModelSpec:
    """Spec for a U-Net with one ConvBlock per width and a mirrored decoder.

    Declared counts default to the closed-form convolution count; the
    reference tables can be passed instead so construction checks against them.
    """
    h, w = (size, size) if isinstance(size, int) else size
    depth = len(widths)
    if h % 2**depth or w % 2**depth:
        raise InputError(f"input {h}x{w} is not divisible by {2 ** depth}")

    encoder = []
    c_in, sh, sw = 3, h, w
    for i, c in enumerate(widths):
        sh, sw = sh // 2, sw // 2
        encoder.append(LayerSpec("convblock", c, 3, 1, conv_params(c_in, c) + conv_params(c, c),
                                 (c, sh, sw), f"enc{i + 1}"))
        c_in = c
    encoder.append(LayerSpec("conv", bottleneck, 3, 1, conv_params(c_in, bottleneck),
                             (bottleneck, sh, sw), "bottleneck"))

    def decoder(c_out_final: int) -> tuple[list, dict]:
        layers, wiring = [], {}
        prev = bottleneck
        dh, dw = sh, sw
        for i, c in enumerate(reversed(widths)):
            skip_stage = depth - 1 - i
            c_cat = prev + widths[skip_stage]
            dh, dw = dh * 2, dw * 2
            layers.append(LayerSpec("convblock_up", c, 3, 1, conv_params(c_cat, c) + conv_params(c, c),
                                    (c, dh, dw), f"dec{i + 1}"))
            wiring[i] = skip_stage
            prev = c
        layers.append(LayerSpec("conv", prev, 3, 1, conv_params(prev, prev), (prev, dh, dw), "refine"))
        layers.append(LayerSpec("conv", c_out_final, 3, 1, conv_params(prev, c_out_final),
                                (c_out_final, dh, dw), "head"))
        return layers, wiring

    dec_m, wiring = decoder(num_classes)
    dec_x, _ = decoder(3 * num_classes)
    if declared_encoder is not None:
        for layer, count in zip(encoder, declared_encoder):
            layer.declared_params = count
    if declared_decoder is not None:
        for layer, count in zip(dec_x, declared_decoder):
            layer.declared_params = count
    return ModelSpec(num_classes, (3, h, w), encoder, dec_m, dec_x, wiring, name)


def paper_spec(num_classes: int = 2) -> ModelSpec:
    """224x224 reference architecture; at K=2 checked against the published tables."""
    enc = dec = None
    if num_classes == 2:
        enc = [row[2] for row in PAPER_ENCODER_TABLE]
        dec = [row[2] for row in PAPER_DECODER_TABLE]
    return unet_spec(num_classes, 224, name="paper", declared_encoder=enc, declared_decoder=dec)


def desk_spec(num_classes: int = 2, size: int = 64) -> ModelSpec:
    """Width-reduced variant (all channel widths divided by 8) for CPU runs."""
    return unet_spec(num_classes, size, widths=(8, 16, 32, 64), bottleneck=128, name="desk")


def spec_for_scale(scale: str, num_classes: int, size: int | None = None) -> ModelSpec:
    if scale == "paper":
        if size not in (None, 224):
            raise ConfigurationError("paper scale is fixed at 224x224")
        return paper_spec(num_classes)
    if scale == "desk":
        return desk_spec(num_classes, size or 64)
    raise ConfigurationError(f"unknown scale {scale!r}")


# ---------------------------------------------------------------------------
# networks


def _conv(c_in: int, c_out: int, k: int) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, k, stride=1, padding=k // 2)


class ConvBlock(nn.Sequential):
    """Conv, LeakyReLU, Conv, LeakyReLU, MaxPool(2)."""

    def __init__(self, c_in, c_out, k=3):
        super().__init__(
            _conv(c_in, c_out, k), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(c_out, c_out, k), nn.LeakyReLU(LEAKY_SLOPE),
            nn.MaxPool2d(2, 2),
        )


class ConvBlockUp(nn.Sequential):
    """Conv, LeakyReLU, nearest Upsample(x2), Conv, LeakyReLU."""

    def __init__(self, c_in, c_out, k=3):
        super().__init__(
            _conv(c_in, c_out, k), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _conv(c_out, c_out, k), nn.LeakyReLU(LEAKY_SLOPE),
        )


class Encoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        blocks = []
        c_in = spec.input_size[0]
        for layer in spec.encoder[:-1]:
            blocks.append(ConvBlock(c_in, layer.out_channels, layer.kernel))
            c_in = layer.out_channels
        self.blocks = nn.ModuleList(blocks)
        last = spec.encoder[-1]
        self.bottleneck = nn.Sequential(_conv(c_in, last.out_channels, last.kernel), nn.LeakyReLU(LEAKY_SLOPE))

    def forward(self, image):
        skips = []
        h = image
        for block in self.blocks:
            h = block(h)
            skips.append(h)
        return self.bottleneck(h), skips


class Decoder(nn.Module):
    def __init__(self, layers: list, wiring: dict, encoder_layers: list):
        super().__init__()
        bottleneck = encoder_layers[-1].out_channels
        skip_ch = [l.out_channels for l in encoder_layers[:-1]]
        stages = []
        prev = bottleneck
        up_layers = [l for l in layers if l.kind == "convblock_up"]
        for i, layer in enumerate(up_layers):
            if i not in wiring:
                raise ConfigurationError(f"decoder stage {layer.name or i}: no skip wiring")
            c_cat = prev + skip_ch[wiring[i]]
            expected = layer.declared_params
            first = conv_params(c_cat, layer.out_channels, layer.kernel)
            second = conv_params(layer.out_channels, layer.out_channels, layer.kernel)
            if expected and first + second != expected:
                raise ConfigurationError(
                    f"decoder stage {layer.name or i}: {prev} + {skip_ch[wiring[i]]} input channels "
                    f"give {first + second} parameters, declared {expected}"
                )
            stages.append(ConvBlockUp(c_cat, layer.out_channels, layer.kernel))
            prev = layer.out_channels
        self.stages = nn.ModuleList(stages)
        self.wiring = [wiring[i] for i in range(len(stages))]
        refine, head = layers[len(up_layers):]
        self.refine = nn.Sequential(_conv(prev, refine.out_channels, refine.kernel), nn.LeakyReLU(LEAKY_SLOPE))
        self.head = _conv(refine.out_channels, head.out_channels, head.kernel)

    def forward(self, bottleneck, skips):
        h = bottleneck
        for stage, s in zip(self.stages, self.wiring):
            h = stage(torch.cat([h, skips[s]], dim=1))
        return self.head(self.refine(h))


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, mode="fan_in", nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


def init_background_prior(seg: "Segmenter", logit: float = BACKGROUND_PRIOR) -> None:
    """Bias the mask head so every pixel starts out as background.

    Foreground logits get ``-logit`` and the background logit ``+logit``.
    Starting from uniform masks instead lets reconstruction settle into an
    even split where both image-lets carry a tinted copy of the scene, which
    the guidance and area terms are too weak to undo.
    """
    with torch.no_grad():
        bias = seg.mask_decoder.head.bias
        bias.fill_(-logit)
        bias[-1] = logit


class MaskNet(nn.Module):
    """Mask network view: encoder plus mask decoder, returns logits (B, K, H, W)."""

    def __init__(self, encoder, decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, image):
        return self.decoder(*self.encoder(image))


class DecompNet(nn.Module):
    """Decomposition network view: encoder plus linear decoder, returns (B, K, 3, H, W)."""

    def __init__(self, encoder, decoder, num_classes):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.num_classes = num_classes

    def forward(self, image):
        out = self.decoder(*self.encoder(image))
        b, _, h, w = out.shape
        return out.reshape(b, self.num_classes, 3, h, w)


class Segmenter(nn.Module):
    """Owns the shared encoder and both decoders; ``f_m``/``f_x`` are views over them."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.mask_decoder = Decoder(spec.decoder_mask, spec.skip_wiring, spec.encoder)
        self.decomp_decoder = Decoder(spec.decoder_x, spec.skip_wiring, spec.encoder)
        # plain tuple so the views are not registered twice as submodules
        self._views = (
            MaskNet(self.encoder, self.mask_decoder),
            DecompNet(self.encoder, self.decomp_decoder, spec.num_classes),
        )

    @property
    def f_m(self) -> MaskNet:
        return self._views[0]

    @property
    def f_x(self) -> DecompNet:
        return self._views[1]

    def forward(self, image):
        return forward_pair(self.f_m, self.f_x, image)


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _layer_modules(seg: "Segmenter") -> dict:
    return {
        "encoder": list(seg.encoder.blocks) + [seg.encoder.bottleneck],
        "decoder_mask": list(seg.mask_decoder.stages) + [seg.mask_decoder.refine, seg.mask_decoder.head],
        "decoder_x": list(seg.decomp_decoder.stages) + [seg.decomp_decoder.refine, seg.decomp_decoder.head],
    }


def _output_shapes(spec: ModelSpec) -> dict:
    # a meta-device copy gives shapes without allocating or computing anything
    with torch.device("meta"):
        meta = Segmenter(spec)
    shapes, hooks = {}, []
    for part, mods in _layer_modules(meta).items():
        for i, mod in enumerate(mods):
            hooks.append(mod.register_forward_hook(
                lambda _m, _i, out, key=(part, i): shapes.__setitem__(key, tuple(out.shape[1:]))
            ))
    try:
        with torch.no_grad():
            bott, skips = meta.encoder(torch.empty((1, *spec.input_size), device="meta"))
            meta.mask_decoder(bott, skips)
            meta.decomp_decoder(bott, skips)
    finally:
        for h in hooks:
            h.remove()
    return shapes


def layer_table(seg: Segmenter) -> list[dict]:
    """Per-layer declared vs. actual parameter counts and output shapes."""
    spec = seg.spec
    shapes = _output_shapes(spec)
    modules = _layer_modules(seg)
    rows = []
    for part, layers in (("encoder", spec.encoder), ("decoder_mask", spec.decoder_mask), ("decoder_x", spec.decoder_x)):
        for i, (layer, mod) in enumerate(zip(layers, modules[part])):
            rows.append({
                "part": part,
                "layer": layer.name,
                "kind": layer.kind,
                "declared_params": layer.declared_params,
                "actual_params": _count(mod),
                "declared_out_shape": list(layer.declared_out_shape),
                "actual_out_shape": list(shapes.get((part, i), ())),
            })
    return rows


def build_segmenter(
    spec: ModelSpec,
    device: str | torch.device = "cpu",
    verify: bool = True,
    background_prior: float = BACKGROUND_PRIOR,
) -> Segmenter:
    """Construct the segmenter and check every layer against its declared count and shape.

    ``background_prior`` is the initial mask-head logit margin in favour of
    background (see :func:`init_background_prior`); 0 gives uniform masks.
    """
    with torch.device(device):
        seg = Segmenter(spec)
    if str(device) != "meta":
        _init_weights(seg)
        init_background_prior(seg, background_prior)
    if verify:
        for row in layer_table(seg):
            if row["declared_params"] and row["declared_params"] != row["actual_params"]:
                raise ConfigurationError(
                    f"{row['part']}/{row['layer']}: {row['actual_params']} parameters, "
                    f"declared {row['declared_params']}"
                )
            if row["declared_out_shape"] and row["declared_out_shape"] != row["actual_out_shape"]:
                raise ConfigurationError(
                    f"{row['part']}/{row['layer']}: output {row['actual_out_shape']}, "
                    f"declared {row['declared_out_shape']}"
                )
    return seg


def forward_pair(f_m: MaskNet, f_x: DecompNet, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mask stack (softmax over K) and decomposition from a single encoder pass."""
    if f_m.encoder is not f_x.encoder:
        raise ConfigurationError("mask and decomposition networks must share one encoder")
    depth = len(f_m.encoder.blocks)
    h, w = image.shape[-2:]
    if h % 2**depth or w % 2**depth:
        raise InputError(f"input {h}x{w} is not divisible by {2 ** depth}")
    bott, skips = f_m.encoder(image)
    logits = f_m.decoder(bott, skips)
    x = f_x.decoder(bott, skips)
    b, _, hh, ww = x.shape
    return torch.softmax(logits, dim=1), x.reshape(b, f_x.num_classes, 3, hh, ww)


# ---------------------------------------------------------------------------
# classifier

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.downsample = None
        if stride != 1 or c_in != c_out:
            self.downsample = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class Classifier(nn.Module):
    """18-layer residual classifier with ``K - 1`` sigmoid outputs.

    Parameter names follow torchvision's ``resnet18`` so ImageNet weights load
    directly when ``width == 64``.
    """

    def __init__(self, num_classes: int, width: int = 64):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError("classifier needs K >= 2")
        self.num_classes = num_classes
        self.width = width
        self.frozen = False
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.conv1 = nn.Conv2d(3, width, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        c = width
        for i, mult in enumerate((1, 2, 4, 8)):
            stride = 1 if i == 0 else 2
            layer = nn.Sequential(BasicBlock(c, width * mult, stride), BasicBlock(width * mult, width * mult))
            setattr(self, f"layer{i + 1}", layer)
            c = width * mult
        self.fc = nn.Linear(c, num_classes - 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def logits(self, image):
        x = (image - self.mean) / self.std
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))

    def forward(self, image):
        return torch.sigmoid(self.logits(image))

    def freeze(self) -> "Classifier":
        self.frozen = True
        self.requires_grad_(False)
        self.zero_grad(set_to_none=True)
        return self.eval()

    def train(self, mode: bool = True):
        # a frozen classifier keeps its batch-norm statistics fixed
        return super().train(mode and not self.frozen)


def build_classifier(num_classes: int, pretrained: bool = False, width: int = 64) -> Classifier:
    g = Classifier(num_classes, width)
    if pretrained:
        if width != 64:
            raise ConfigurationError("pretrained weights exist only for width 64")
        try:
            from torchvision.models import ResNet18_Weights, resnet18

            ref = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
        except Exception as exc:  # download or cache failure
            raise ResourceError(f"pretrained ResNet-18 weights unavailable: {exc}") from exc
        state = {k: v for k, v in ref.state_dict().items() if not k.startswith("fc.")}
        missing, unexpected = g.load_state_dict(state, strict=False)
        if unexpected or set(missing) - {"fc.weight", "fc.bias", "mean", "std"}:
            raise ConfigurationError(f"pretrained weights do not fit: {missing} {unexpected}")
    return g


def checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.json"


def save_checkpoint(
    path: str | Path,
    seg: Segmenter | None = None,
    classifier: Classifier | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "decompseg-checkpoint/1"}
    if seg is not None:
        torch.save(seg.encoder.state_dict(), path / "encoder.pt")
        torch.save(seg.mask_decoder.state_dict(), path / "mask_decoder.pt")
        torch.save(seg.decomp_decoder.state_dict(), path / "decomp_decoder.pt")
        manifest["model_spec"] = seg.spec.to_dict()
        manifest["num_classes"] = seg.spec.num_classes
        manifest["input_size"] = list(seg.spec.input_size)
        manifest["param_table"] = layer_table(seg)
    if classifier is not None:
        torch.save(classifier.state_dict(), path / "classifier.pt")
        manifest["classifier"] = {
            "num_classes": classifier.num_classes,
            "width": classifier.width,
            "checksum": checksum(classifier),
        }
        manifest.setdefault("num_classes", classifier.num_classes)
    if extra:
        manifest.update(extra)
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path / MANIFEST)
    return path


def read_manifest(path: str | Path) -> dict:
    f = Path(path) / MANIFEST
    if not f.exists():
        raise ResourceError(f"no checkpoint manifest at {f}")
    return json.loads(f.read_text())


def spec_diff(a: ModelSpec, b: ModelSpec) -> dict:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def load_segmenter(path: str | Path, expect: ModelSpec | None = None) -> Segmenter:
    path = Path(path)
    manifest = read_manifest(path)
    if "model_spec" not in manifest:
        raise ResourceError(f"checkpoint {path} holds no segmenter")
    spec = ModelSpec.from_dict(manifest["model_spec"])
    if expect is not None:
        diff = spec_diff(spec, expect)
        if diff:
            raise SpecMismatchError(f"checkpoint spec differs in {sorted(diff)}", diff)
    seg = build_segmenter(spec, verify=False)
    seg.encoder.load_state_dict(torch.load(path / "encoder.pt", weights_only=True))
    seg.mask_decoder.load_state_dict(torch.load(path / "mask_decoder.pt", weights_only=True))
    seg.decomp_decoder.load_state_dict(torch.load(path / "decomp_decoder.pt", weights_only=True))
    return seg


def load_classifier(path: str | Path, freeze: bool = True) -> Classifier:
    path = Path(path)
    manifest = read_manifest(path)
    info = manifest.get("classifier")
    if info is None or not (path / "classifier.pt").exists():
        raise ResourceError(f"checkpoint {path} holds no classifier")
    g = Classifier(info["num_classes"], info["width"])
    g.load_state_dict(torch.load(path / "classifier.pt", weights_only=True))
    return g.freeze() if freeze else g


def parameter_summary(seg: Segmenter) -> dict:
    return {
        "encoder": _count(seg.encoder),
        "decoder_mask": _count(seg.mask_decoder),
        "decoder_x": _count(seg.decomp_decoder),
        "total": _count(seg),
    }


def paper_table_diff(seg: Segmenter) -> list[str]:
    """Mismatches between a K=2 224x224 segmenter and the reference tables (empty when equal)."""
    problems = []
    spec = seg.spec
    if spec.num_classes != 2 or spec.input_size != (3, 224, 224):
        return [f"reference tables apply to K=2 at 224x224, got K={spec.num_classes} {spec.input_size}"]
    rows = layer_table(seg)
    enc = [r for r in rows if r["part"] == "encoder"]
    dec = [r for r in rows if r["part"] == "decoder_x"]
    for row, (kind, shape, count) in zip(enc, PAPER_ENCODER_TABLE):
        if row["actual_params"] != count or tuple(row["actual_out_shape"]) != shape:
            problems.append(f"encoder {kind}: {row['actual_params']} {row['actual_out_shape']} vs {count} {shape}")
    for row, (kind, shape, count) in zip(dec, PAPER_DECODER_TABLE):
        want_shape = tuple(6 if s == "C_out" else s for s in shape)
        if row["actual_params"] != count or tuple(row["actual_out_shape"]) != want_shape:
            problems.append(f"decoder {kind}: {row['actual_params']} {row['actual_out_shape']} vs {count} {want_shape}")
    summary = parameter_summary(seg)
    if summary["encoder"] != PAPER_ENCODER_TOTAL:
        problems.append(f"encoder total {summary['encoder']} vs {PAPER_ENCODER_TOTAL}")
    if summary["decoder_x"] != PAPER_DECODER_TOTAL:
        problems.append(f"decoder total {summary['decoder_x']} vs {PAPER_DECODER_TOTAL}")
    return problems


def format_table(rows: list[dict]) -> str:
    lines = [f"{'part':<13}{'layer':<11}{'kind':<13}{'declared':>12}{'actual':>12}  out_shape"]
    for r in rows:
        lines.append(
            f"{r['part']:<13}{r['layer']:<11}{r['kind']:<13}{r['declared_params']:>12,}"
            f"{r['actual_params']:>12,}  {tuple(r['actual_out_shape'])}"
        )
    return "\n".join(lines)

