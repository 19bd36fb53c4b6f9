"""3D residual classifiers (depths 18, 34, 50) over single-channel volumes.

Stem: 7x7x7 conv, stride (1,2,2), pad 3, BN, ReLU, 3x3x3 max-pool stride 2
pad 1. Four stages with widths base*{1,2,4,8}; stage 1 keeps stride 1,
stages 2-4 open with an isotropic stride-2 block. Shortcuts project with a
1x1x1 conv + BN whenever shape changes. Global average pooling feeds a
linear head. All parameters are float32 and drawn from a single seeded
generator in declaration order, so a (spec, seed) pair pins every bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec, MissingTensor, ShapeMismatch, UnknownLayer
from .tensor import (
    Tensor,
    batchnorm3d,
    conv3d,
    cross_entropy,
    global_avg_pool,
    linear,
    maxpool3d,
    relu,
)

_LAYOUTS = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
}
STAGE_NAMES = ("stage1", "stage2", "stage3", "stage4")


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 18
    base_width: int = 8
    in_channels: int = 1
    num_classes: int = 2

    def __post_init__(self):
        if self.depth not in _LAYOUTS:
            raise InvalidSpec(f"depth must be one of {sorted(_LAYOUTS)}, got {self.depth}")
        if self.base_width < 1:
            raise InvalidSpec(f"base_width must be >= 1, got {self.base_width}")
        if self.in_channels < 1:
            raise InvalidSpec(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise InvalidSpec(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def block_kind(self) -> str:
        return _LAYOUTS[self.depth][0]

    @property
    def blocks_per_stage(self) -> tuple[int, ...]:
        return _LAYOUTS[self.depth][1]

    @property
    def expansion(self) -> int:
        return 4 if self.block_kind == "bottleneck" else 1

    @property
    def head_features(self) -> int:
        return self.base_width * 8 * self.expansion


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: tuple[int, int, int]) -> Tensor:
    fan_in = cin * k[0] * k[1] * k[2]
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, *k))
    return Tensor(w.astype(np.float32), requires_grad=True)


class Conv3d:
    def __init__(self, rng, cin, cout, kernel, stride=(1, 1, 1), padding=(0, 0, 0)):
        self.weight = _he_conv(rng, cout, cin, kernel)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm3d:
    def __init__(self, channels: int):
        self.weight = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.frozen = False
        self.momentum = 0.1

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        live = training and not self.frozen
        return batchnorm3d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=live, momentum=self.momentum,
        )


class BasicBlock:
    expansion = 1

    def __init__(self, rng, cin, width, stride):
        k, p = (3, 3, 3), (1, 1, 1)
        s = (stride,) * 3
        self.conv1 = Conv3d(rng, cin, width, k, s, p)
        self.bn1 = BatchNorm3d(width)
        self.conv2 = Conv3d(rng, width, width, k, (1, 1, 1), p)
        self.bn2 = BatchNorm3d(width)
        self.down = None
        if stride != 1 or cin != width:
            self.down = (
                Conv3d(rng, cin, width, (1, 1, 1), s, (0, 0, 0)),
                BatchNorm3d(width),
            )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1(self.conv1(x), training))
        out = self.bn2(self.conv2(out), training)
        short = x if self.down is None else self.down[1](self.down[0](x), training)
        return relu(out + short)


class Bottleneck:
    expansion = 4

    def __init__(self, rng, cin, width, stride):
        s = (stride,) * 3
        cout = width * self.expansion
        self.conv1 = Conv3d(rng, cin, width, (1, 1, 1))
        self.bn1 = BatchNorm3d(width)
        self.conv2 = Conv3d(rng, width, width, (3, 3, 3), s, (1, 1, 1))
        self.bn2 = BatchNorm3d(width)
        self.conv3 = Conv3d(rng, width, cout, (1, 1, 1))
        self.bn3 = BatchNorm3d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = (
                Conv3d(rng, cin, cout, (1, 1, 1), s, (0, 0, 0)),
                BatchNorm3d(cout),
            )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1(self.conv1(x), training))
        out = relu(self.bn2(self.conv2(out), training))
        out = self.bn3(self.conv3(out), training)
        short = x if self.down is None else self.down[1](self.down[0](x), training)
        return relu(out + short)


class Model:
    """Structured layers plus a flat named-parameter view."""

    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.mode = "train"
        rng = np.random.default_rng(seed)
        base = spec.base_width
        self.stem_conv = Conv3d(
            rng, spec.in_channels, base, (7, 7, 7), (1, 2, 2), (3, 3, 3)
        )
        self.stem_bn = BatchNorm3d(base)
        block_cls = BasicBlock if spec.block_kind == "basic" else Bottleneck
        self.stages: list[list] = []
        cin = base
        for si, n_blocks in enumerate(spec.blocks_per_stage):
            width = base * (2 ** si)
            stride = 1 if si == 0 else 2
            blocks = []
            for bi in range(n_blocks):
                blk = block_cls(rng, cin, width, stride if bi == 0 else 1)
                cin = width * block_cls.expansion
                blocks.append(blk)
            self.stages.append(blocks)
        fan_in = spec.head_features
        self.head_weight = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.num_classes, fan_in)).astype(np.float32),
            requires_grad=True,
        )
        self.head_bias = Tensor(np.zeros(spec.num_classes, np.float32), requires_grad=True)

    # -- modes ---------------------------------------------------------------

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    @property
    def training(self) -> bool:
        return self.mode == "train"

    # -- naming --------------------------------------------------------------

    def _conv_bn_units(self):
        """Yield (prefix, conv_or_none, bn_or_none) in declaration order."""
        yield "stem.conv", self.stem_conv, None
        yield "stem.bn", None, self.stem_bn
        for si, blocks in enumerate(self.stages):
            for bi, blk in enumerate(blocks):
                name = f"stage{si + 1}.block{bi + 1}"
                yield f"{name}.conv1", blk.conv1, None
                yield f"{name}.bn1", None, blk.bn1
                yield f"{name}.conv2", blk.conv2, None
                yield f"{name}.bn2", None, blk.bn2
                if isinstance(blk, Bottleneck):
                    yield f"{name}.conv3", blk.conv3, None
                    yield f"{name}.bn3", None, blk.bn3
                if blk.down is not None:
                    yield f"{name}.down.conv", blk.down[0], None
                    yield f"{name}.down.bn", None, blk.down[1]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, conv, bn in self._conv_bn_units():
            if conv is not None:
                out[f"{prefix}.weight"] = conv.weight
            else:
                out[f"{prefix}.weight"] = bn.weight
                out[f"{prefix}.bias"] = bn.bias
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def batchnorms(self) -> dict[str, BatchNorm3d]:
        return {p: bn for p, _, bn in self._conv_bn_units() if bn is not None}

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running stats, copied."""
        state = {k: v.data.copy() for k, v in self.parameters().items()}
        for name, bn in self.batchnorms().items():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> list[str]:
        """Load every model tensor from `state`; returns ignored extra keys."""
        own: dict[str, np.ndarray] = {k: v.data for k, v in self.parameters().items()}
        for name, bn in self.batchnorms().items():
            own[f"{name}.running_mean"] = bn.running_mean
            own[f"{name}.running_var"] = bn.running_var
        for key, dst in own.items():
            if key not in state:
                raise MissingTensor(f"checkpoint lacks tensor {key!r}")
            src = np.asarray(state[key], np.float32)
            if src.shape != dst.shape:
                raise ShapeMismatch(
                    f"checkpoint tensor {key!r} has shape {src.shape}, model expects {dst.shape}"
                )
            dst[...] = src
        return sorted(set(state) - set(own))

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    # -- forward -------------------------------------------------------------

    def _stem(self, x: Tensor) -> Tensor:
        out = relu(self.stem_bn(self.stem_conv(x), self.training))
        return maxpool3d(out)

    def _run_stage(self, si: int, x: Tensor) -> Tensor:
        for blk in self.stages[si]:
            x = blk(x, self.training)
        return x

    def _head(self, x: Tensor) -> Tensor:
        pooled = global_avg_pool(x)
        n = pooled.data.shape[0]
        return linear(pooled.reshape(n, -1), self.head_weight, self.head_bias)

    def forward(self, x: Tensor) -> Tensor:
        """Logits (N, num_classes) for input (N, C, D, H, W)."""
        if x.data.ndim != 5 or x.data.shape[1] != self.spec.in_channels:
            raise ShapeMismatch(
                f"expected (N,{self.spec.in_channels},D,H,W), got {x.data.shape}"
            )
        out = self._stem(x)
        for si in range(4):
            out = self._run_stage(si, out)
        return self._head(out)

    def forward_capturing(self, x: Tensor, layer: str) -> tuple[Tensor, Tensor]:
        """Logits plus the captured post-ReLU output of one stage.

        The captured node is marked requires_grad so a later backward
        fills its grad buffer even if the trunk is frozen.
        """
        if layer not in STAGE_NAMES:
            raise UnknownLayer(f"layer must be one of {STAGE_NAMES}, got {layer!r}")
        want = STAGE_NAMES.index(layer)
        out = self._stem(x)
        captured = None
        for si in range(4):
            out = self._run_stage(si, out)
            if si == want:
                captured = out
                captured.requires_grad = True
        return self._head(out), captured

    def forward_from(self, layer: str, activation: Tensor) -> Tensor:
        """Run the tail of the network given one stage's output."""
        if layer not in STAGE_NAMES:
            raise UnknownLayer(f"layer must be one of {STAGE_NAMES}, got {layer!r}")
        out = activation
        for si in range(STAGE_NAMES.index(layer) + 1, 4):
            out = self._run_stage(si, out)
        return self._head(out)

    def loss(self, x: Tensor, labels: np.ndarray) -> Tensor:
        return cross_entropy(self.forward(x), labels)


def build_model(spec: ModelSpec, seed: int) -> Model:
    return Model(spec, seed)


FREEZE_POLICIES = ("none", "final_stage_and_head")


def apply_freeze_policy(m: Model, policy: str):
    """'none' trains everything; 'final_stage_and_head' leaves exactly
    stage4.* and head.* trainable and pins earlier batch-norms to their
    running statistics."""
    if policy not in FREEZE_POLICIES:
        raise InvalidSpec(f"unknown freeze policy {policy!r}")
    trainable_prefixes = ("stage4.", "head.") if policy == "final_stage_and_head" else ("",)
    for name, t in m.parameters().items():
        t.requires_grad = name.startswith(trainable_prefixes)
    for name, bn in m.batchnorms().items():
        bn.frozen = policy == "final_stage_and_head" and not name.startswith("stage4.")


def spec_from_state(state: dict[str, np.ndarray]) -> ModelSpec:
    """Recover the architecture from checkpoint tensor names and shapes."""
    try:
        stem = state["stem.conv.weight"]
    except KeyError:
        raise MissingTensor("checkpoint lacks tensor 'stem.conv.weight'")
    base, in_channels = int(stem.shape[0]), int(stem.shape[1])
    kind = "bottleneck" if any(".conv3." in k for k in state) else "basic"
    counts = []
    for si in range(1, 5):
        n = len({k.split(".")[1] for k in state if k.startswith(f"stage{si}.")})
        counts.append(n)
    for depth, (k, layout) in _LAYOUTS.items():
        if k == kind and layout == tuple(counts):
            num_classes = int(state["head.weight"].shape[0]) if "head.weight" in state else 2
            return ModelSpec(depth, base, in_channels, num_classes)
    raise InvalidSpec(f"checkpoint stage layout {counts} ({kind}) matches no known depth")
