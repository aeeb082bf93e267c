"""Small U-shaped encoder-decoder with a pixel head and an object-presence head."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class NetSpec:
    in_channels: int = 3
    stage_classes: int = 9
    base_width: int = 16
    depth: int = 2

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.stage_classes < 2:
            raise ValueError("stage_classes must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")

    @property
    def presence_classes(self) -> int:
        return self.stage_classes - 1

    @property
    def align(self) -> int:
        return 2 ** self.depth

    def width(self, level: int) -> int:
        return self.base_width * 2 ** level

    def shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        """Every parameter name and shape, in canonical order."""
        out: OrderedDict[str, tuple[int, ...]] = OrderedDict()

        def conv(name, cin, cout, k=3):
            out[f"{name}.w"] = (cout, cin, k, k)
            out[f"{name}.b"] = (cout,)

        cin = self.in_channels
        for lvl in range(self.depth):
            conv(f"enc{lvl}.conv0", cin, self.width(lvl))
            conv(f"enc{lvl}.conv1", self.width(lvl), self.width(lvl))
            cin = self.width(lvl)
        wb = self.width(self.depth)
        conv("bottleneck.conv0", cin, wb)
        conv("bottleneck.conv1", wb, wb)
        cin = wb
        for lvl in reversed(range(self.depth)):
            conv(f"dec{lvl}.conv0", cin + self.width(lvl), self.width(lvl))
            conv(f"dec{lvl}.conv1", self.width(lvl), self.width(lvl))
            cin = self.width(lvl)
        conv("seg_head", cin, self.stage_classes, k=1)
        out["presence_head.w"] = (wb, self.presence_classes)
        out["presence_head.b"] = (self.presence_classes,)
        return out

    @classmethod
    def from_shapes(cls, shapes: dict[str, tuple[int, ...]]) -> "NetSpec":
        depth = sum(1 for n in shapes if n.startswith("enc") and n.endswith(".conv0.w"))
        w0 = shapes["enc0.conv0.w"]
        spec = cls(
            in_channels=w0[1],
            stage_classes=shapes["seg_head.w"][0],
            base_width=w0[0],
            depth=depth,
        )
        expected = spec.shapes()
        if dict(expected) != {k: tuple(v) for k, v in shapes.items()}:
            raise ValueError("parameter set does not match any NetSpec")
        return spec


class Params(OrderedDict):
    """Ordered name -> leaf Tensor mapping for one stage network."""

    @property
    def spec(self) -> NetSpec:
        return NetSpec.from_shapes({k: v.shape for k, v in self.items()})

    def copy_tensors(self) -> "Params":
        return Params((k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)) for k, v in self.items())

    def frozen(self) -> "Params":
        """Views of the same data that do not require gradients."""
        return Params((k, Tensor(v.data, requires_grad=False, name=k)) for k, v in self.items())

    def n_parameters(self) -> int:
        return int(sum(v.data.size for v in self.values()))


@dataclass
class StageOutputs:
    seg_logits: Tensor
    presence_logits: Tensor


def init_params(spec: NetSpec, seed: int) -> Params:
    """He-normal kernels (variance 2/fan_in), zero biases; deterministic in seed."""
    rng = np.random.default_rng(seed)
    params = Params()
    for name, shape in spec.shapes().items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _conv_relu(params: Params, name: str, x: Tensor) -> Tensor:
    try:
        return ad.relu(ad.conv2d(x, params[f"{name}.w"], params[f"{name}.b"]))
    except ad.ShapeError as exc:
        raise ad.ShapeError(f"layer {name}: {exc}") from exc


def forward(params: Params, image: Tensor) -> StageOutputs:
    """Run the network on ``[C,H,W]`` or a batch ``[N,C,H,W]``."""
    spec = params.spec
    if image.ndim not in (3, 4):
        raise ad.ShapeError(f"image must be [C,H,W] or [N,C,H,W], got {image.shape}")
    c, h, w = image.shape[-3:]
    if c != spec.in_channels:
        raise ad.ShapeError(f"image has {c} channels, network expects {spec.in_channels}")
    if h % spec.align or w % spec.align:
        raise ad.ShapeError(f"spatial size {h}x{w} not divisible by {spec.align}")

    skips = []
    x = image
    for lvl in range(spec.depth):
        x = _conv_relu(params, f"enc{lvl}.conv0", x)
        x = _conv_relu(params, f"enc{lvl}.conv1", x)
        skips.append(x)
        x = ad.maxpool2(x)
    x = _conv_relu(params, "bottleneck.conv0", x)
    x = _conv_relu(params, "bottleneck.conv1", x)
    bottleneck = x
    for lvl in reversed(range(spec.depth)):
        x = ad.channel_concat(ad.upsample2(x), skips[lvl])
        x = _conv_relu(params, f"dec{lvl}.conv0", x)
        x = _conv_relu(params, f"dec{lvl}.conv1", x)
    seg = ad.conv2d(x, params["seg_head.w"], params["seg_head.b"])
    pooled = ad.global_avg_pool(bottleneck)
    presence = ad.matmul(pooled, params["presence_head.w"], params["presence_head.b"])
    return StageOutputs(seg, presence)


# Pixels per stacked forward pass.  Small stacks stay cache-resident and are
# markedly faster than one large stack on a single core.
STACK_PIXELS = 8192


def stack_size(shape, pixels: int = STACK_PIXELS) -> int:
    """How many images of ``shape`` ([..., H, W]) to stack in one forward pass."""
    return max(1, pixels // (shape[-1] * shape[-2]))


def predict_labelmap(seg_logits) -> np.ndarray:
    """Per-pixel argmax over the channel axis; ties go to the lowest index."""
    data = seg_logits.data if isinstance(seg_logits, Tensor) else np.asarray(seg_logits)
    if data.shape[-3] < 2:
        raise ValueError("need at least two classes")
    return data.argmax(axis=-3).astype(np.uint8)


def predict_presence(presence_logits, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    z = presence_logits.data if isinstance(presence_logits, Tensor) else np.asarray(presence_logits)
    z = z.astype(np.float64)
    return 1.0 / (1.0 + np.exp(-z)) >= threshold
