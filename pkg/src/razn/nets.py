"""Segmentation and policy networks plus an analytic multiply-accumulate counter.

The segmentation net is a ResNet18-style FCN: 7x7/2 stem with 3x3/2 max-pool,
four residual stages, a 1x1 classifier and bilinear upsampling back to the
input size. Stages 3 and 4 can keep stride 1 (dilated 2 and 4), giving output
stride 8.

The policy net shares the stem design and replaces each residual stage by a
single 3x3 conv + BN + ReLU, then global-average-pools to one raw score.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.params import ParamStore
from .autodiff.tensor import DEFAULT_DTYPE, Tensor, as_tensor
from .errors import ConfigError

NUM_CLASSES = 4


@dataclass
class SegNetConfig:
    num_classes: int = NUM_CLASSES
    in_channels: int = 3
    widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    stem_width: int | None = None
    keep_stage3: bool = True
    keep_stage4: bool = True
    dilate: bool = True
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ConfigError("segmentation net needs exactly four stage widths and block counts")
        if min(self.widths) < 1 or min(self.blocks) < 1:
            raise ConfigError("stage widths and block counts must be positive")

    @classmethod
    def full_scale(cls) -> "SegNetConfig":
        return cls(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), input_size=(256, 256))

    @property
    def stem_channels(self) -> int:
        return self.stem_width or self.widths[0]

    def stage_geometry(self) -> list[tuple[int, int]]:
        """``(stride, dilation)`` for each of the four stages."""
        geo = [(1, 1), (2, 1)]
        dil = 1
        for keep in (self.keep_stage3, self.keep_stage4):
            if keep:
                if self.dilate:
                    dil *= 2
                geo.append((1, dil))
            else:
                geo.append((2, dil))
        return geo

    @property
    def output_stride(self) -> int:
        s = 4
        for stride, _ in self.stage_geometry():
            s *= stride
        return s

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PolicyNetConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (8, 16, 32, 64)
    stem_width: int | None = None
    stem_stride: int = 2
    block_strides: tuple[int, ...] = (2, 2, 2, 2)
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.block_strides = tuple(int(s) for s in self.block_strides)
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.widths) != 4 or len(self.block_strides) != 4:
            raise ConfigError("policy net needs exactly four block widths and strides")
        if self.stem_stride not in (1, 2):
            raise ConfigError("policy stem stride must be 1 or 2")

    @classmethod
    def full_scale(cls) -> "PolicyNetConfig":
        # a full-resolution stem puts the policy at ~8% of the segmentation cost
        return cls(widths=(64, 128, 256, 512), stem_stride=1, input_size=(256, 256))

    @property
    def stem_channels(self) -> int:
        return self.stem_width or self.widths[0]

    def to_dict(self) -> dict:
        return asdict(self)


def _from_dict(cls, d: dict):
    unknown = sorted(set(d) - set(cls.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    return cls(**d)


def seg_config_from_dict(d: dict) -> SegNetConfig:
    return _from_dict(SegNetConfig, d)


def policy_config_from_dict(d: dict) -> PolicyNetConfig:
    return _from_dict(PolicyNetConfig, d)


# ------------------------------------------------------------------ params


def _conv_init(rng: np.random.Generator, k: int, c: int, kh: int, kw: int, gain: float = 2.0) -> np.ndarray:
    fan_in = c * kh * kw
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=(k, c, kh, kw))


def _add_bn(store: ParamStore, prefix: str, c: int) -> None:
    store.add(f"{prefix}.gamma", np.ones(c))
    store.add(f"{prefix}.beta", np.zeros(c))
    store.add_buffer(f"{prefix}.running_mean", np.zeros(c))
    store.add_buffer(f"{prefix}.running_var", np.ones(c))


def init_seg_params(cfg: SegNetConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    c = cfg.stem_channels
    store.add("stem.conv.weight", _conv_init(rng, c, cfg.in_channels, 7, 7))
    _add_bn(store, "stem.bn", c)
    for i, (w, n) in enumerate(zip(cfg.widths, cfg.blocks)):
        stride, _ = cfg.stage_geometry()[i]
        for b in range(n):
            p = f"stage{i + 1}.{b}"
            store.add(f"{p}.conv1.weight", _conv_init(rng, w, c, 3, 3))
            _add_bn(store, f"{p}.bn1", w)
            store.add(f"{p}.conv2.weight", _conv_init(rng, w, w, 3, 3))
            _add_bn(store, f"{p}.bn2", w)
            if b == 0 and (stride != 1 or c != w):
                store.add(f"{p}.down.conv.weight", _conv_init(rng, w, c, 1, 1))
                _add_bn(store, f"{p}.down.bn", w)
            c = w
    store.add("head.weight", _conv_init(rng, cfg.num_classes, c, 1, 1, gain=1.0))
    store.add("head.bias", np.zeros(cfg.num_classes))
    return store


def init_policy_params(cfg: PolicyNetConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    c = cfg.stem_channels
    store.add("stem.conv.weight", _conv_init(rng, c, cfg.in_channels, 7, 7))
    _add_bn(store, "stem.bn", c)
    for i, w in enumerate(cfg.widths):
        store.add(f"block{i + 1}.conv.weight", _conv_init(rng, w, c, 3, 3))
        _add_bn(store, f"block{i + 1}.bn", w)
        c = w
    store.add("fc.weight", rng.normal(0.0, np.sqrt(1.0 / c), size=(1, c)))
    store.add("fc.bias", np.zeros(1))
    return store


# ----------------------------------------------------------------- forward


def _bn(store: ParamStore, prefix: str, x: Tensor, training: bool) -> Tensor:
    return ops.batchnorm2d(
        x,
        store[f"{prefix}.gamma"],
        store[f"{prefix}.beta"],
        store.buffer(f"{prefix}.running_mean"),
        store.buffer(f"{prefix}.running_var"),
        training,
    )


def _stem(store: ParamStore, x: Tensor, training: bool, stride: int = 2) -> Tensor:
    h = ops.conv2d(x, store["stem.conv.weight"], stride=stride, pad=3)
    h = ops.relu(_bn(store, "stem.bn", h, training))
    return ops.max_pool2d(h, 3, 2, 1)


def check_seg_input(cfg: SegNetConfig, shape: tuple[int, ...]) -> None:
    if len(shape) != 4 or shape[1] != cfg.in_channels:
        raise ConfigError(f"segmentation input must be [N,{cfg.in_channels},H,W], got {list(shape)}")
    os_ = cfg.output_stride
    if shape[2] % os_ or shape[3] % os_:
        raise ConfigError(f"input size {shape[2]}x{shape[3]} not divisible by output stride {os_}")


def seg_forward(store: ParamStore, cfg: SegNetConfig, image, training: bool = False) -> Tensor:
    """Logits ``[N, C, H, W]`` for an image batch ``[N, 3, H, W]``."""
    x = as_tensor(image, dtype=store.dtype)
    check_seg_input(cfg, x.shape)
    H, W = x.shape[2:]
    h = _stem(store, x, training)
    geo = cfg.stage_geometry()
    for i, n in enumerate(cfg.blocks):
        stride, dil = geo[i]
        for b in range(n):
            p = f"stage{i + 1}.{b}"
            s = stride if b == 0 else 1
            out = ops.conv2d(h, store[f"{p}.conv1.weight"], stride=s, pad=dil, dilation=dil)
            out = ops.relu(_bn(store, f"{p}.bn1", out, training))
            out = ops.conv2d(out, store[f"{p}.conv2.weight"], stride=1, pad=dil, dilation=dil)
            out = _bn(store, f"{p}.bn2", out, training)
            if f"{p}.down.conv.weight" in store:
                short = ops.conv2d(h, store[f"{p}.down.conv.weight"], stride=s)
                short = _bn(store, f"{p}.down.bn", short, training)
            else:
                short = h
            h = ops.relu(ops.add(out, short))
    logits = ops.conv2d(h, store["head.weight"], store["head.bias"])
    return ops.bilinear_resize(logits, H, W)


def policy_forward(store: ParamStore, cfg: PolicyNetConfig, image, training: bool = False) -> Tensor:
    """One raw (pre-sigmoid) score per image: ``[N]``."""
    x = as_tensor(image, dtype=store.dtype)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ConfigError(f"policy input must be [N,{cfg.in_channels},H,W], got {list(x.shape)}")
    if min(x.shape[2:]) < 16:
        raise ConfigError("policy input must be at least 16x16")
    h = _stem(store, x, training, stride=cfg.stem_stride)
    for i, s in enumerate(cfg.block_strides):
        h = ops.conv2d(h, store[f"block{i + 1}.conv.weight"], stride=s, pad=1)
        h = ops.relu(_bn(store, f"block{i + 1}.bn", h, training))
    feat = ops.global_avg_pool(h)
    score = ops.linear(feat, store["fc.weight"], store["fc.bias"])
    return _flatten_scores(score)


def _flatten_scores(score: Tensor) -> Tensor:
    from .autodiff.tensor import make_result

    n = score.shape[0]
    return make_result(score.data.reshape(n), (score,), lambda g: (g.reshape(n, 1),))


# ------------------------------------------------------------------- costs


def conv_macs(k: int, c: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    return k * c * kh * kw * h_out * w_out


def _out(size: int, k: int, stride: int, pad: int, dil: int = 1) -> int:
    return ops.conv_output_size(size, k, stride, pad, dil)


def count_seg_macs(cfg: SegNetConfig, input_size: tuple[int, int] | None = None) -> list[tuple[str, int]]:
    """Per-layer MACs for one image; BN counts one MAC per element, resize four per output element."""
    H, W = input_size or cfg.input_size
    check_seg_input(cfg, (1, cfg.in_channels, H, W))
    layers: list[tuple[str, int]] = []
    c = cfg.stem_channels
    h, w = _out(H, 7, 2, 3), _out(W, 7, 2, 3)
    layers.append(("stem.conv", conv_macs(c, cfg.in_channels, 7, 7, h, w)))
    layers.append(("stem.bn", c * h * w))
    h, w = _out(h, 3, 2, 1), _out(w, 3, 2, 1)
    for i, (width, n) in enumerate(zip(cfg.widths, cfg.blocks)):
        stride, dil = cfg.stage_geometry()[i]
        for b in range(n):
            p = f"stage{i + 1}.{b}"
            s = stride if b == 0 else 1
            h2, w2 = _out(h, 3, s, dil, dil), _out(w, 3, s, dil, dil)
            layers.append((f"{p}.conv1", conv_macs(width, c, 3, 3, h2, w2)))
            layers.append((f"{p}.bn1", width * h2 * w2))
            layers.append((f"{p}.conv2", conv_macs(width, width, 3, 3, h2, w2)))
            layers.append((f"{p}.bn2", width * h2 * w2))
            if b == 0 and (s != 1 or c != width):
                layers.append((f"{p}.down.conv", conv_macs(width, c, 1, 1, h2, w2)))
                layers.append((f"{p}.down.bn", width * h2 * w2))
            c, h, w = width, h2, w2
    layers.append(("head", conv_macs(cfg.num_classes, c, 1, 1, h, w)))
    if (h, w) != (H, W):
        layers.append(("upsample", 4 * cfg.num_classes * H * W))
    return layers


def count_policy_macs(cfg: PolicyNetConfig, input_size: tuple[int, int] | None = None) -> list[tuple[str, int]]:
    H, W = input_size or cfg.input_size
    layers: list[tuple[str, int]] = []
    c = cfg.stem_channels
    h, w = _out(H, 7, cfg.stem_stride, 3), _out(W, 7, cfg.stem_stride, 3)
    layers.append(("stem.conv", conv_macs(c, cfg.in_channels, 7, 7, h, w)))
    layers.append(("stem.bn", c * h * w))
    h, w = _out(h, 3, 2, 1), _out(w, 3, 2, 1)
    for i, (width, s) in enumerate(zip(cfg.widths, cfg.block_strides)):
        h, w = _out(h, 3, s, 1), _out(w, 3, s, 1)
        layers.append((f"block{i + 1}.conv", conv_macs(width, c, 3, 3, h, w)))
        layers.append((f"block{i + 1}.bn", width * h * w))
        c = width
    layers.append(("fc", c))
    return layers


@dataclass
class CostModel:
    input_size: tuple[int, int]
    seg_macs: int
    policy_macs: int
    seg_layers: list[tuple[str, int]] = field(repr=False, default_factory=list)
    policy_layers: list[tuple[str, int]] = field(repr=False, default_factory=list)

    @property
    def ratio(self) -> float:
        return self.policy_macs / self.seg_macs

    def as_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "seg_macs": self.seg_macs,
            "policy_macs": self.policy_macs,
            "ratio": self.ratio,
        }


def flop_count(
    seg_cfg: SegNetConfig, policy_cfg: PolicyNetConfig, input_size: tuple[int, int] | None = None
) -> CostModel:
    size = tuple(input_size or seg_cfg.input_size)
    seg_layers = count_seg_macs(seg_cfg, size)
    pol_layers = count_policy_macs(policy_cfg, size)
    return CostModel(
        input_size=size,
        seg_macs=sum(m for _, m in seg_layers),
        policy_macs=sum(m for _, m in pol_layers),
        seg_layers=seg_layers,
        policy_layers=pol_layers,
    )
