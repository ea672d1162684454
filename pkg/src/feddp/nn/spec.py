"""Static model descriptions and the named presets."""

from __future__ import annotations

from dataclasses import dataclass, field

from feddp.errors import StructuralError

KINDS = ("conv2d", "linear", "relu", "norm", "avgpool", "globalavgpool", "flatten", "block")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    gated: bool = False
    channels: int = 0          # norm
    in_features: int = 0       # linear
    out_features: int = 0      # linear
    pool: int = 2              # avgpool

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"unknown layer kind {self.kind!r}")
        if self.gated and self.kind not in ("conv2d", "block"):
            raise StructuralError(f"{self.name}: only convolutions can be gated")


def conv(name, cin, cout, k=3, stride=1, padding=None, gated=False) -> LayerSpec:
    if padding is None:
        padding = k // 2
    return LayerSpec("conv2d", name, cin, cout, k, stride, padding, gated)


def norm(name, channels) -> LayerSpec:
    return LayerSpec("norm", name, channels=channels)


def fc(name, fin, fout) -> LayerSpec:
    return LayerSpec("linear", name, in_features=fin, out_features=fout)


def block(name, cin, cout, stride=1, gated=True) -> LayerSpec:
    """Basic residual block; only its first convolution can carry a gate."""
    return LayerSpec("block", name, cin, cout, 3, stride, 1, gated)


RELU = LayerSpec("relu")
GAP = LayerSpec("globalavgpool")
FLATTEN = LayerSpec("flatten")


def pool(k=2) -> LayerSpec:
    return LayerSpec("avgpool", pool=k)


@dataclass(frozen=True)
class Unit:
    """One parameterized primitive after expanding residual blocks.

    ``input_gate`` names the gated conv whose channel selection reaches this
    unit's input unchanged (through norm/ReLU/pooling), if any.
    """
    kind: str                    # conv2d | norm | linear
    name: str
    cin: int
    cout: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    out_hw: tuple[int, int] = (1, 1)
    gated: bool = False
    input_gate: str | None = None
    has_bias: bool = True

    @property
    def num_params(self) -> int:
        if self.kind == "conv2d":
            return self.cout * self.cin * self.kernel ** 2 + (self.cout if self.has_bias else 0)
        if self.kind == "norm":
            return 2 * self.cout
        return self.cout * self.cin + self.cout


def block_parts(layer: LayerSpec) -> dict[str, LayerSpec]:
    n = layer.name
    parts = {
        "conv1": conv(f"{n}.conv1", layer.in_channels, layer.out_channels, 3, layer.stride,
                      gated=layer.gated),
        "norm1": norm(f"{n}.norm1", layer.out_channels),
        "conv2": conv(f"{n}.conv2", layer.out_channels, layer.out_channels, 3, 1),
        "norm2": norm(f"{n}.norm2", layer.out_channels),
    }
    if layer.stride != 1 or layer.in_channels != layer.out_channels:
        parts["proj"] = conv(f"{n}.proj", layer.in_channels, layer.out_channels, 1,
                             layer.stride, padding=0)
        parts["proj_norm"] = norm(f"{n}.proj_norm", layer.out_channels)
    return parts


def _out_extent(size, k, stride, padding):
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise StructuralError(f"conv output extent {out} < 1")
    return out


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...]
    default_keep_ratio: float = 0.68
    units: tuple[Unit, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self._walk()))
        convs = [u for u in self.units if u.kind == "conv2d"]
        if not convs:
            raise StructuralError(f"{self.name}: model has no convolution")
        if convs[0].gated:
            raise StructuralError(f"{self.name}: the first convolution cannot be gated")
        linears = [u for u in self.units if u.kind == "linear"]
        if not linears or linears[-1].cout != self.num_classes:
            raise StructuralError(f"{self.name}: last linear layer must output num_classes")

    def _walk(self):
        c, h, w = self.input_shape
        flat = None
        gate = None
        names = set()

        def claim(name):
            if not name or name in names:
                raise StructuralError(f"{self.name}: layer name {name!r} missing or repeated")
            names.add(name)

        for layer in self.layers:
            kind = layer.kind
            if kind == "conv2d":
                if flat is not None or layer.in_channels != c:
                    raise StructuralError(
                        f"{layer.name}: expects {layer.in_channels} channels, gets {c}")
                claim(layer.name)
                h = _out_extent(h, layer.kernel_size, layer.stride, layer.padding)
                w = _out_extent(w, layer.kernel_size, layer.stride, layer.padding)
                yield Unit("conv2d", layer.name, c, layer.out_channels, layer.kernel_size,
                           layer.stride, layer.padding, (h, w), layer.gated, gate)
                c = layer.out_channels
                gate = layer.name if layer.gated else None
            elif kind == "block":
                if flat is not None or layer.in_channels != c:
                    raise StructuralError(
                        f"{layer.name}: expects {layer.in_channels} channels, gets {c}")
                claim(layer.name)
                parts = block_parts(layer)
                c1 = parts["conv1"]
                h = _out_extent(h, 3, layer.stride, 1)
                w = _out_extent(w, 3, layer.stride, 1)
                g1 = c1.name if c1.gated else None
                yield Unit("conv2d", c1.name, c, layer.out_channels, 3, layer.stride, 1,
                           (h, w), c1.gated, gate)
                yield Unit("norm", parts["norm1"].name, layer.out_channels,
                           layer.out_channels, input_gate=g1)
                yield Unit("conv2d", parts["conv2"].name, layer.out_channels,
                           layer.out_channels, 3, 1, 1, (h, w), False, g1)
                yield Unit("norm", parts["norm2"].name, layer.out_channels, layer.out_channels)
                if "proj" in parts:
                    yield Unit("conv2d", parts["proj"].name, c, layer.out_channels, 1,
                               layer.stride, 0, (h, w), False, gate)
                    yield Unit("norm", parts["proj_norm"].name, layer.out_channels,
                               layer.out_channels)
                c = layer.out_channels
                gate = None
            elif kind == "norm":
                if flat is not None or layer.channels != c:
                    raise StructuralError(f"{layer.name}: {layer.channels} channels, gets {c}")
                claim(layer.name)
                yield Unit("norm", layer.name, c, c, input_gate=gate)
            elif kind == "avgpool":
                if h % layer.pool or w % layer.pool:
                    raise StructuralError(f"avgpool {layer.pool} does not divide {h}x{w}")
                h, w = h // layer.pool, w // layer.pool
            elif kind == "globalavgpool":
                h = w = 1
            elif kind == "flatten":
                flat = c * h * w
                gate = None
            elif kind == "linear":
                width = flat if flat is not None else None
                if width != layer.in_features:
                    raise StructuralError(
                        f"{layer.name}: expects {layer.in_features} features, gets {width}")
                claim(layer.name)
                yield Unit("linear", layer.name, layer.in_features, layer.out_features)
                flat = layer.out_features
            # relu: shape-preserving, keeps the gate

    def gated_units(self) -> list[Unit]:
        return [u for u in self.units if u.gated]

    def num_params(self) -> int:
        """Trainable backbone parameter count (running stats excluded)."""
        return sum(u.num_params for u in self.units)


def _vgg(name, input_shape, cfg, head, num_classes, keep) -> ModelSpec:
    layers = []
    c = input_shape[0]
    i = 0
    for item in cfg:
        if item == "M":
            layers.append(pool(2))
            continue
        i += 1
        layers += [conv(f"conv{i}", c, item, gated=i > 1), norm(f"norm{i}", item), RELU]
        c = item
    layers += head(c)
    return ModelSpec(name, input_shape, num_classes, tuple(layers), keep)


def tiny_vgg(num_classes=4, image_size=8, in_channels=3, gated=(2, 3, 4),
             widths=(4, 8, 16, 32)) -> ModelSpec:
    """Four conv blocks, sized for CPU-scale federated runs; pooling after the first."""
    layers = []
    c = in_channels
    for i, out in enumerate(widths, 1):
        pool_after = i == 1
        layers += [conv(f"conv{i}", c, out, gated=i in gated), norm(f"norm{i}", out), RELU]
        if pool_after:
            layers.append(pool(2))
        c = out
    layers += [GAP, FLATTEN, fc("fc", c, num_classes)]
    return ModelSpec("tiny-vgg", (in_channels, image_size, image_size), num_classes,
                     tuple(layers), 0.68)


def tiny_resnet(num_classes=4, image_size=8, in_channels=3) -> ModelSpec:
    layers = [conv("stem", in_channels, 8), norm("stem_norm", 8), RELU,
              block("stage1", 8, 8), block("stage2", 8, 16, 2), block("stage3", 16, 32, 2),
              GAP, FLATTEN, fc("fc", 32, num_classes)]
    return ModelSpec("tiny-resnet", (in_channels, image_size, image_size), num_classes,
                     tuple(layers), 0.5)


def vgg11_shape(num_classes=1000, image_size=224) -> ModelSpec:
    cfg = [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"]
    side = image_size // 32

    def head(c):
        return [FLATTEN, fc("fc1", c * side * side, 4096), RELU, fc("fc2", 4096, 4096), RELU,
                fc("fc3", 4096, num_classes)]

    return _vgg("vgg11-shape", (3, image_size, image_size), cfg, head, num_classes, 0.68)


def resnet32_shape(num_classes=10, image_size=32) -> ModelSpec:
    layers = [conv("stem", 3, 16), norm("stem_norm", 16), RELU]
    c = 16
    for s, width in enumerate((16, 32, 64), 1):
        for b in range(5):
            stride = 2 if (b == 0 and s > 1) else 1
            layers.append(block(f"stage{s}.block{b}", c, width, stride))
            c = width
    layers += [GAP, FLATTEN, fc("fc", c, num_classes)]
    return ModelSpec("resnet32-shape", (3, image_size, image_size), num_classes,
                     tuple(layers), 0.5)


PRESETS = {
    "tiny-vgg": tiny_vgg,
    "tiny-resnet": tiny_resnet,
    "vgg11-shape": vgg11_shape,
    "resnet32-shape": resnet32_shape,
}


def preset(name: str, **kwargs) -> ModelSpec:
    try:
        builder = PRESETS[name]
    except KeyError:
        raise StructuralError(
            f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return builder(**kwargs)
