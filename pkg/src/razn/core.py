"""Reinforced auto-zoom: policy, reward, alternating training and zoom inference.

A patch ``x0`` at pyramid level ``l`` is scored by the policy net. The acting
probability is the bounded Bernoulli ``pt = alpha * p + (1 - alpha) * (1 - p)``
with ``p = sigmoid(score)``. Zooming fetches the same window at level ``l + 1``
(``rate`` times larger), splits it into ``rate**2`` patches and segments those
with the next network; breaking segments ``x0`` directly.

Training (one zoom level) samples the action per patch, rewards a zoom by the
relative change between the coarse loss ``J0`` and the mean loss ``J1`` of the
children, takes a REINFORCE step on the policy, and updates only the
segmentation net selected by the action.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.optim import LrSchedule, adam_step, lr_at
from .autodiff.params import ParamStore
from .autodiff.tensor import Tensor, no_grad
from .errors import ArtifactMismatchError, ConfigError, NumericError
from .metrics import ConfusionAccumulator, CostLedger, CostRecord
from .nets import (
    NUM_CLASSES,
    PolicyNetConfig,
    SegNetConfig,
    init_policy_params,
    init_seg_params,
    policy_config_from_dict,
    policy_forward,
    seg_config_from_dict,
    seg_forward,
)
from .pyramid import PatchRef, PyramidDataset, crop_grid, label_upsample, stitch, zoom_region

log = logging.getLogger(__name__)

AS_WRITTEN = "as-written"
LOSS_DECREASE = "loss-decrease"
REWARD_SIGNS = (AS_WRITTEN, LOSS_DECREASE)
BASELINE_KINDS = ("scale1", "scale2", "ms")


@dataclass
class ZoomConfig:
    max_zoom: int = 1
    rate: int = 2
    alpha: float = 0.8
    reward_sign: str = AS_WRITTEN
    eps: float = 1e-8
    # inference: "threshold" zooms when pt > 0.5, "sample" draws from the policy
    decision: str = "threshold"

    def __post_init__(self):
        if self.max_zoom < 1:
            raise ConfigError("max_zoom must be >= 1")
        if self.rate < 2 or int(self.rate) != self.rate:
            raise ConfigError("zoom rate must be an integer >= 2")
        if not 0.5 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0.5, 1)")
        if self.reward_sign not in REWARD_SIGNS:
            raise ConfigError(f"reward_sign must be one of {REWARD_SIGNS}")
        if self.decision not in ("threshold", "sample"):
            raise ConfigError("decision must be 'threshold' or 'sample'")


@dataclass
class PolicyDecision:
    score: float
    p: float
    p_tilde: float
    action: int
    draw: float


@dataclass
class RewardRecord:
    j0: float
    j1: float
    reward: float


# ----------------------------------------------------------------- policy


def bounded_prob(p, alpha: float):
    """``alpha * p + (1 - alpha) * (1 - p)``; accepts floats, arrays or Tensors."""
    if isinstance(p, Tensor):
        return ops.add(ops.mul(p, 2 * alpha - 1), 1 - alpha)
    return alpha * p + (1 - alpha) * (1 - p)


def sample_action(p_tilde: float, rng: np.random.Generator) -> tuple[int, float]:
    """Bernoulli draw; returns the action and the uniform that produced it."""
    u = float(rng.random())
    return int(u < p_tilde), u


def decide(score: float, alpha: float, rng: np.random.Generator) -> PolicyDecision:
    p = float(ops._expit(np.array([score], dtype=np.float64))[0])
    pt = bounded_prob(p, alpha)
    a, u = sample_action(pt, rng)
    return PolicyDecision(float(score), p, pt, a, u)


def reward(a, j0, j1, cfg: ZoomConfig):
    """Zoom reward normalized by the coarse loss; exactly zero for ``a == 0``.

    Works elementwise on arrays.
    """
    a = np.asarray(a, dtype=np.float64)
    j0 = np.asarray(j0, dtype=np.float64)
    j1 = np.asarray(j1, dtype=np.float64)
    diff = j1 - j0 if cfg.reward_sign == AS_WRITTEN else j0 - j1
    r = a * diff / np.maximum(j0, cfg.eps)
    return float(r) if r.ndim == 0 else r


def policy_log_prob(scores: Tensor, actions: np.ndarray, alpha: float) -> Tensor:
    """``log(a * pt + (1 - a) * (1 - pt))`` per sample, differentiable in the scores."""
    a = np.asarray(actions, dtype=scores.dtype)
    pt = bounded_prob(ops.sigmoid(scores), alpha)
    chosen = ops.add(ops.mul(pt, 2 * a - 1), 1 - a)
    return ops.log(chosen)


def policy_objective(scores: Tensor, actions: np.ndarray, rewards: np.ndarray, alpha: float) -> Tensor:
    """Batch-mean REINFORCE surrogate ``-R(a) * log pi(a)``; its gradient is the estimator."""
    logp = policy_log_prob(scores, actions, alpha)
    return ops.mean(ops.mul(logp, -np.asarray(rewards, dtype=scores.dtype)))


def policy_objective_and_grad(decision: PolicyDecision, R: float, alpha: float) -> tuple[float, float]:
    """Single-sample surrogate value and its derivative w.r.t. the raw score.

    Backpropagating the returned seed through the policy net gives the
    estimator's gradient for that sample.
    """
    a, p, pt = decision.action, decision.p, decision.p_tilde
    chosen = pt if a == 1 else 1.0 - pt
    value = -R * np.log(chosen)
    dlog_dpt = 1.0 / pt if a == 1 else -1.0 / (1.0 - pt)
    seed = -R * dlog_dpt * (2 * alpha - 1) * p * (1 - p)
    return float(value), float(seed)


def expected_objective(scores: Tensor, r1: np.ndarray, alpha: float) -> Tensor:
    """Exact ``-E[R]`` by enumerating actions: ``-(pt * R(1) + (1 - pt) * R(0))`` with ``R(0) = 0``."""
    pt = bounded_prob(ops.sigmoid(scores), alpha)
    return ops.mean(ops.mul(pt, -np.asarray(r1, dtype=scores.dtype)))


# ------------------------------------------------------------------- losses


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``uint8 [N,3,H,W]`` to network input in ``[-1, 1]``."""
    return (np.asarray(images, dtype=dtype) / 127.5 - 1.0).astype(dtype)


def seg_loss(logits: Tensor, labels: np.ndarray, weights=None) -> Tensor:
    """Pixel-averaged cross-entropy against an index mask ``[N,H,W]``."""
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        from .errors import ValidationError

        raise ValidationError(f"labels {labels.shape} do not match logits {logits.shape}")
    return ops.softmax_cross_entropy_map(logits, ops.one_hot(labels, logits.shape[1], logits.dtype), weights)


# ----------------------------------------------------------------- sampling


def split_refs(ds: PyramidDataset, level: int, size: int, split: str, test_fraction: float = 0.25, seed: int = 0):
    """Deterministic patch-level split of the aligned grid into train / test / all."""
    refs = ds.grid_refs(level, size)
    if split == "all":
        return refs
    order = np.random.default_rng(seed).permutation(len(refs))
    n_test = int(round(test_fraction * len(refs)))
    test_idx = set(order[:n_test].tolist())
    if split == "test":
        return [r for i, r in enumerate(refs) if i in test_idx]
    if split == "train":
        return [r for i, r in enumerate(refs) if i not in test_idx]
    raise ConfigError(f"unknown split {split!r} (expected train, test or all)")


class PatchSampler:
    """Draws aligned patches, oversampling those that contain non-normal labels."""

    def __init__(self, ds: PyramidDataset, level: int, size: int, split: str = "train", stratify: float = 0.5, **split_kw):
        self.ds = ds
        self.level = level
        self.size = size
        self.refs = split_refs(ds, level, size, split, **split_kw)
        if not self.refs:
            raise ConfigError("no patches available for sampling")
        self.abnormal = np.array([bool((ds.read_labels(r) > 0).any()) for r in self.refs])
        self.stratify = stratify

    def draw(self, rng: np.random.Generator, n: int) -> list[PatchRef]:
        out = []
        pos = np.flatnonzero(self.abnormal)
        for _ in range(n):
            if pos.size and rng.random() < self.stratify:
                out.append(self.refs[int(pos[rng.integers(pos.size)])])
            else:
                out.append(self.refs[int(rng.integers(len(self.refs)))])
        return out


@dataclass
class Batch:
    refs: list[PatchRef]
    x0: np.ndarray
    y0: np.ndarray
    x1: np.ndarray
    y1: np.ndarray


def load_batch(ds: PyramidDataset, refs: Sequence[PatchRef], rate: int) -> Batch:
    x0, y0, x1, y1 = [], [], [], []
    for ref in refs:
        img, lab = ds.read_patch(ref)
        x0.append(img)
        y0.append(lab)
        for child in crop_grid(zoom_region(ds, ref), rate).children:
            ci, cl = ds.read_patch(child)
            x1.append(ci)
            y1.append(cl)
    return Batch(list(refs), to_input(np.stack(x0)), np.stack(y0), to_input(np.stack(x1)), np.stack(y1))


# ---------------------------------------------------------------- training


@dataclass
class TrainSettings:
    """Everything besides the networks that determines a training run."""

    level: int = 0
    patch_size: int = 64
    batch_size: int = 8
    stratify: float = 0.5
    test_fraction: float = 0.25
    split_seed: int = 0
    seed: int = 0


@dataclass
class TrainState:
    seg: list[ParamStore]
    policy: list[ParamStore]
    seg_cfg: SegNetConfig
    policy_cfg: PolicyNetConfig
    zoom: ZoomConfig
    schedule: LrSchedule
    settings: TrainSettings
    rng: np.random.Generator
    step: int = 0
    kind: str = "razn"

    @classmethod
    def create(
        cls,
        seg_cfg: SegNetConfig | None = None,
        policy_cfg: PolicyNetConfig | None = None,
        zoom: ZoomConfig | None = None,
        schedule: LrSchedule | None = None,
        settings: TrainSettings | None = None,
    ) -> "TrainState":
        seg_cfg = seg_cfg or SegNetConfig()
        policy_cfg = policy_cfg or PolicyNetConfig()
        zoom = zoom or ZoomConfig()
        settings = settings or TrainSettings()
        ss = np.random.SeedSequence(settings.seed)
        seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(2 * zoom.max_zoom + 2)]
        seg = [init_seg_params(seg_cfg, seeds[i]) for i in range(zoom.max_zoom + 1)]
        pol = [init_policy_params(policy_cfg, seeds[zoom.max_zoom + 1 + i]) for i in range(zoom.max_zoom)]
        rng = np.random.Generator(np.random.PCG64(seeds[-1]))
        return cls(seg, pol, seg_cfg, policy_cfg, zoom, schedule or LrSchedule(), settings, rng)

    def stores(self) -> dict[str, ParamStore]:
        out = {f"seg{i}": s for i, s in enumerate(self.seg)}
        for i, p in enumerate(self.policy):
            out["policy" if i == 0 else f"policy{i + 1}"] = p
        return out


@dataclass
class StepReport:
    step: int
    lr: float
    j0_mean: float
    j1_mean: float
    zoom_fraction: float
    reward_mean: float
    actions: list[int] = field(default_factory=list, repr=False)
    p_tilde: list[float] = field(default_factory=list, repr=False)
    rewards: list[float] = field(default_factory=list, repr=False)
    updated: list[str] = field(default_factory=list, repr=False)

    def log_record(self) -> dict:
        return {
            "step": self.step,
            "j0_mean": self.j0_mean,
            "j1_mean": self.j1_mean,
            "zoom_fraction": self.zoom_fraction,
            "reward_mean": self.reward_mean,
            "lr": self.lr,
        }


def _check_finite(values: np.ndarray, refs: Sequence[PatchRef], what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        where = [refs[i].as_list() for i in np.flatnonzero(bad)[:3]]
        raise NumericError(f"non-finite {what} for patch(es) {where}")


def train_step(state: TrainState, batch: Batch, force_actions: Sequence[int] | None = None) -> StepReport:
    """One alternating update on a batch (single zoom level).

    Losses feeding the reward are evaluated in inference mode without graph
    recording; the selected segmentation net is then trained on its subset in
    training mode. Stores not selected by any sample are left untouched,
    batch-norm statistics included.
    """
    if state.zoom.max_zoom != 1:
        raise ConfigError("training is implemented for max_zoom == 1 only")
    B = len(batch.refs)
    r2 = state.zoom.rate**2
    alpha = state.zoom.alpha
    lr = lr_at(state.schedule, state.step)
    seg0, seg1 = state.seg
    policy = state.policy[0]

    scores = policy_forward(policy, state.policy_cfg, batch.x0, training=True)
    pt = bounded_prob(ops._expit(scores.data.astype(np.float64)), alpha)
    draws = state.rng.random(B)
    actions = (draws < pt).astype(np.int64)
    if force_actions is not None:
        actions = np.asarray(force_actions, dtype=np.int64).reshape(B)

    with no_grad():
        j0 = ops.cross_entropy_per_image(seg_forward(seg0, state.seg_cfg, batch.x0).data, batch.y0)
        j1 = ops.cross_entropy_per_image(seg_forward(seg1, state.seg_cfg, batch.x1).data, batch.y1)
        j1 = j1.reshape(B, r2).mean(axis=1)
    _check_finite(j0, batch.refs, "coarse loss")
    _check_finite(j1, batch.refs, "zoomed loss")
    R = reward(actions, j0, j1, state.zoom)

    obj = policy_objective(scores, actions, R, alpha)
    _check_finite(np.atleast_1d(obj.data), batch.refs[:1], "policy objective")
    obj.backward()
    adam_step(policy, lr)
    updated = ["policy"]

    idx0 = np.flatnonzero(actions == 0)
    if idx0.size:
        loss = seg_loss(seg_forward(seg0, state.seg_cfg, batch.x0[idx0], training=True), batch.y0[idx0])
        _check_finite(np.atleast_1d(loss.data), [batch.refs[i] for i in idx0], "seg0 loss")
        loss.backward()
        adam_step(seg0, lr)
        updated.append("seg0")
    idx1 = np.flatnonzero(actions == 1)
    if idx1.size:
        cidx = (idx1[:, None] * r2 + np.arange(r2)).ravel()
        loss = seg_loss(seg_forward(seg1, state.seg_cfg, batch.x1[cidx], training=True), batch.y1[cidx])
        _check_finite(np.atleast_1d(loss.data), [batch.refs[i] for i in idx1], "seg1 loss")
        loss.backward()
        adam_step(seg1, lr)
        updated.append("seg1")

    state.step += 1
    return StepReport(
        step=state.step,
        lr=lr,
        j0_mean=float(j0.mean()),
        j1_mean=float(j1.mean()),
        zoom_fraction=float(actions.mean()),
        reward_mean=float(np.mean(R)),
        actions=actions.tolist(),
        p_tilde=np.asarray(pt).tolist(),
        rewards=np.asarray(R).tolist(),
        updated=updated,
    )


# ---------------------------------------------------------------- baselines


def degrade(images: np.ndarray, low: int, out: int) -> np.ndarray:
    """Bilinear downsample to ``low x low`` and back up to ``out x out``."""
    x = Tensor(np.asarray(images))
    with no_grad():
        small = ops.bilinear_resize(x, low, low)
        return ops.bilinear_resize(small, out, out).data


@dataclass
class BaselineState:
    """Single segmentation net trained at one scale (or both, for ``ms``).

    ``source="pyramid"`` reads the coarse scale from the patch's own level and
    the fine scale from the next level. ``source="bilinear"`` instead reads the
    finest level and synthesizes each scale by bilinear down/up-sampling to
    ``net_size``.
    """

    kind: str
    seg: ParamStore
    seg_cfg: SegNetConfig
    schedule: LrSchedule
    settings: TrainSettings
    rng: np.random.Generator
    scale_rng: np.random.Generator
    rate: int = 2
    source: str = "pyramid"
    net_size: int | None = None
    pin_scale: str | None = None
    step: int = 0

    @classmethod
    def create(
        cls,
        kind: str,
        seg_cfg: SegNetConfig | None = None,
        schedule: LrSchedule | None = None,
        settings: TrainSettings | None = None,
        rate: int = 2,
        source: str = "pyramid",
        net_size: int | None = None,
        pin_scale: str | None = None,
    ) -> "BaselineState":
        if kind not in BASELINE_KINDS:
            raise ConfigError(f"baseline kind must be one of {BASELINE_KINDS}")
        if source not in ("pyramid", "bilinear"):
            raise ConfigError("baseline source must be 'pyramid' or 'bilinear'")
        seg_cfg = seg_cfg or SegNetConfig()
        settings = settings or TrainSettings()
        ss = np.random.SeedSequence(settings.seed)
        s_init, s_rng, s_scale = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        return cls(
            kind,
            init_seg_params(seg_cfg, s_init),
            seg_cfg,
            schedule or LrSchedule(),
            settings,
            np.random.Generator(np.random.PCG64(s_rng)),
            np.random.Generator(np.random.PCG64(s_scale)),
            rate,
            source,
            net_size,
            pin_scale,
        )

    def stores(self) -> dict[str, ParamStore]:
        return {"seg0": self.seg}

    def scale_choices(self, n: int) -> list[str]:
        if self.kind != "ms":
            return [self.kind] * n
        draws = self.scale_rng.random(n)
        if self.pin_scale is not None:
            return [self.pin_scale] * n
        return ["scale1" if u < 0.5 else "scale2" for u in draws]


def _baseline_inputs(state: BaselineState, ds: PyramidDataset, ref: PatchRef, scale: str, rng=None):
    """Network input(s) and labels for one patch at one scale.

    Returns ``(images uint8 [n,3,h,w] or float, labels [n,h,w], level)``.
    """
    r = state.rate
    if state.source == "bilinear":
        src = ref
        while src.level + 1 < ds.levels:
            src = zoom_region(ds, src)
        img, lab = ds.read_patch(src)
        P = src.height
        size = state.net_size or P
        factor = ds.rate ** (src.level - ref.level)
        low = P // factor if scale == "scale1" else P * r // factor
        x = degrade(to_input(img[None]), low, size)
        if size != P:
            from .pyramid import label_downsample

            lab = label_downsample(lab, P // size, ds.num_classes)
        return x, lab[None], src.level
    if scale == "scale1":
        img, lab = ds.read_patch(ref)
        return to_input(img[None]), lab[None], ref.level
    zref = zoom_region(ds, ref)
    if rng is not None:
        # training: one random child keeps the per-sample input size fixed
        children = crop_grid(zref, r).children
        zref = children[int(rng.integers(len(children)))]
        img, lab = ds.read_patch(zref)
        return to_input(img[None]), lab[None], zref.level
    grid = crop_grid(zref, r)
    imgs, labs = zip(*(ds.read_patch(c) for c in grid.children))
    return to_input(np.stack(imgs)), np.stack(labs), zref.level


def baseline_train_step(state: BaselineState, ds: PyramidDataset, refs: Sequence[PatchRef]) -> StepReport:
    lr = lr_at(state.schedule, state.step)
    scales = state.scale_choices(len(refs))
    groups: dict[str, tuple[list, list]] = {}
    for ref, sc in zip(refs, scales):
        x, y, _ = _baseline_inputs(state, ds, ref, sc, rng=state.rng)
        groups.setdefault(sc, ([], []))
        groups[sc][0].append(x)
        groups[sc][1].append(y)
    B = len(refs)
    total = None
    losses = []
    for sc in sorted(groups):
        xs, ys = groups[sc]
        x, y = np.concatenate(xs), np.concatenate(ys)
        loss = seg_loss(seg_forward(state.seg, state.seg_cfg, x, training=True), y, np.full(len(x), 1.0 / B))
        losses.append(float(loss.data) * B / len(x))
        total = loss if total is None else ops.add(total, loss)
    _check_finite(np.atleast_1d(total.data), list(refs), "baseline loss")
    total.backward()
    adam_step(state.seg, lr)
    state.step += 1
    return StepReport(state.step, lr, float(np.mean(losses)), float("nan"), 0.0, 0.0, updated=["seg0"])


def baseline_predict(state: BaselineState, ds: PyramidDataset, ref: PatchRef) -> tuple[np.ndarray, int, CostRecord]:
    rec = CostRecord(ref.as_list())
    with no_grad():
        if state.kind in ("scale1", "scale2"):
            x, _, level = _baseline_inputs(state, ds, ref, state.kind)
            probs = _softmax(seg_forward(state.seg, state.seg_cfg, x).data)
            rec.seg_units[level] = len(x)
            mask = _assemble(state, ds, ref, probs, level).argmax(axis=0)
            return mask.astype(np.uint8), level, rec
        x1, _, l1 = _baseline_inputs(state, ds, ref, "scale1")
        x2, _, l2 = _baseline_inputs(state, ds, ref, "scale2")
        p1 = _assemble(state, ds, ref, _softmax(seg_forward(state.seg, state.seg_cfg, x1).data), l1)
        p2 = _assemble(state, ds, ref, _softmax(seg_forward(state.seg, state.seg_cfg, x2).data), l2)
        rec.seg_units[l1] = len(x1)
        rec.seg_units[l2] = rec.seg_units.get(l2, 0) + len(x2)
        level = max(l1, l2)
        up = ds.rate ** (level - l1) if state.source == "pyramid" else 1
        p1 = np.repeat(np.repeat(p1, up, axis=1), up, axis=2)
        mask = (p1 + p2).argmax(axis=0)
        return mask.astype(np.uint8), level, rec


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _assemble(state: BaselineState, ds, ref, probs: np.ndarray, level: int) -> np.ndarray:
    """``[C,h,w]`` class probabilities covering ``ref`` at ``level``."""
    if len(probs) == 1:
        p = probs[0]
        if state.source == "bilinear":
            H = ref.height * ds.rate ** (level - ref.level)
            if p.shape[1] != H:
                k = H // p.shape[1]
                p = np.repeat(np.repeat(p, k, axis=1), k, axis=2)
        return p
    grid = crop_grid(zoom_region(ds, ref), state.rate)
    return stitch(grid, [p.transpose(1, 2, 0) for p in probs]).transpose(2, 0, 1)


# ---------------------------------------------------------------- inference


@dataclass
class InferResult:
    mask: np.ndarray
    level: int
    record: CostRecord


def infer_patch(
    state: TrainState,
    ds: PyramidDataset,
    ref: PatchRef,
    cfg: ZoomConfig | None = None,
    force: str | None = None,
    rng: np.random.Generator | None = None,
) -> InferResult:
    """Recursive zoom inference for one patch.

    ``force`` ("break" / "zoom") overrides every policy decision while still
    running and charging the policy pass. Returns the mask at the finest level
    reached; mixed-depth children are brought to that level by replication.
    """
    cfg = cfg or state.zoom
    if force not in (None, "break", "zoom"):
        raise ConfigError("force must be None, 'break' or 'zoom'")
    if cfg.max_zoom > len(state.policy):
        raise ConfigError(f"state has {len(state.policy)} policy net(s), max_zoom={cfg.max_zoom}")
    rec = CostRecord(ref.as_list())
    with no_grad():
        mask, level = _infer(state, ds, ref, 0, cfg, force, rng, rec)
    return InferResult(mask, level, rec)


def _infer(state, ds, ref, depth, cfg, force, rng, rec) -> tuple[np.ndarray, int]:
    img = to_input(ds.read_image(ref)[None])
    if depth < cfg.max_zoom and ref.level + 1 < ds.levels:
        score = float(policy_forward(state.policy[depth], state.policy_cfg, img).data[0])
        pt = bounded_prob(float(ops._expit(np.array([score]))[0]), cfg.alpha)
        rec.policy_units += 1
        rec.p_tilde.append(pt)
        if force is not None:
            zoom = force == "zoom"
        elif cfg.decision == "sample":
            zoom = bool(sample_action(pt, rng or np.random.default_rng(0))[0])
        else:
            zoom = pt > 0.5
        rec.actions.append(int(zoom))
        if zoom:
            grid = crop_grid(zoom_region(ds, ref), cfg.rate)
            parts = [_infer(state, ds, c, depth + 1, cfg, force, rng, rec) for c in grid.children]
            top = max(lvl for _, lvl in parts)
            masks = [m if lvl == top else label_upsample(m, ds.rate ** (top - lvl)) for m, lvl in parts]
            f = ds.rate ** (top - grid.parent.level)
            zr = grid.parent
            out_grid = crop_grid(PatchRef(top, zr.row * f, zr.col * f, zr.height * f, zr.width * f), cfg.rate)
            return stitch(out_grid, masks), top
    logits = seg_forward(state.seg[depth], state.seg_cfg, img).data
    rec.seg_units[ref.level] = rec.seg_units.get(ref.level, 0) + 1
    return logits[0].argmax(axis=0).astype(np.uint8), ref.level


def project_mask(mask: np.ndarray, level: int, target_level: int, rate: int) -> np.ndarray:
    """Bring a mask to ``target_level`` by nearest-neighbour replication."""
    if target_level < level:
        raise ConfigError("can only project masks to finer levels")
    return label_upsample(mask, rate ** (target_level - level)) if target_level > level else mask


PredictFn = Callable[[PatchRef], tuple[np.ndarray, int, CostRecord]]


def evaluate(
    predict: PredictFn, ds: PyramidDataset, refs: Sequence[PatchRef], eval_level: int | None = None
) -> tuple[ConfusionAccumulator, CostLedger]:
    """Score predictions at one canonical level (default: finest)."""
    eval_level = ds.levels - 1 if eval_level is None else eval_level
    acc = ConfusionAccumulator(ds.num_classes)
    ledger = CostLedger()
    for ref in refs:
        mask, level, rec = predict(ref)
        pred = project_mask(mask, level, eval_level, ds.rate)
        f = ds.rate ** (eval_level - ref.level)
        truth = ds.read_labels(PatchRef(eval_level, ref.row * f, ref.col * f, ref.height * f, ref.width * f))
        acc.update(truth, pred)
        ledger.add(rec)
    return acc, ledger


# -------------------------------------------------------------- checkpoints


def _dataset_fingerprint(ds: PyramidDataset) -> dict:
    return {"levels": ds.levels, "rate": ds.rate, "dims": [list(d) for d in ds.dims]}


def save_state(path, state, ds: PyramidDataset | None = None, extra: dict | None = None) -> None:
    """Checkpoint a :class:`TrainState` or :class:`BaselineState`."""
    arrays = {}
    adam_t = {}
    for ns, store in state.stores().items():
        for k, v in store.state_arrays().items():
            arrays[f"{ns}/{k}"] = v
        adam_t[ns] = store.adam_t
    meta = {
        "kind": state.kind,
        "seg_cfg": state.seg_cfg.to_dict(),
        "schedule": asdict(state.schedule),
        "settings": asdict(state.settings),
        "adam_t": adam_t,
        "rng": state.rng.bit_generator.state,
    }
    if isinstance(state, TrainState):
        meta["policy_cfg"] = state.policy_cfg.to_dict()
        meta["zoom"] = asdict(state.zoom)
    else:
        meta["baseline"] = {
            "rate": state.rate,
            "source": state.source,
            "net_size": state.net_size,
            "pin_scale": state.pin_scale,
            "scale_rng": state.scale_rng.bit_generator.state,
        }
    if ds is not None:
        meta["dataset"] = _dataset_fingerprint(ds)
    meta.update(extra or {})
    save_checkpoint(path, arrays, state.step, meta)


def load_state(path):
    """Rebuild the state saved by :func:`save_state`; returns ``(state, header)``."""
    arrays, header = load_checkpoint(path)
    meta = header["meta"]
    try:
        seg_cfg = seg_config_from_dict(meta["seg_cfg"])
        schedule = LrSchedule(**meta["schedule"])
        settings = TrainSettings(**meta["settings"])
        kind = meta["kind"]
    except (KeyError, TypeError) as exc:
        raise ArtifactMismatchError(f"checkpoint metadata incomplete: {exc}") from exc
    if kind == "razn":
        state = TrainState.create(
            seg_cfg, policy_config_from_dict(meta["policy_cfg"]), ZoomConfig(**meta["zoom"]), schedule, settings
        )
    else:
        b = meta["baseline"]
        state = BaselineState.create(
            kind, seg_cfg, schedule, settings, b["rate"], b["source"], b["net_size"], b["pin_scale"]
        )
        state.scale_rng.bit_generator.state = b["scale_rng"]
    for ns, store in state.stores().items():
        prefix = f"{ns}/"
        sub = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
        if not sub:
            raise ArtifactMismatchError(f"checkpoint lacks store {ns!r}")
        store.load_state_arrays(sub, meta["adam_t"][ns])
    expected = {k.split("/")[0] for k in arrays}
    if expected != set(state.stores()):
        raise ArtifactMismatchError(f"checkpoint stores {sorted(expected)} do not match kind {kind!r}")
    state.rng.bit_generator.state = meta["rng"]
    state.step = int(header["step"])
    return state, header


def check_compatible(header: dict, ds: PyramidDataset) -> None:
    fp = header["meta"].get("dataset")
    if fp is not None and fp != _dataset_fingerprint(ds):
        raise ArtifactMismatchError(f"checkpoint was trained on a pyramid with {fp}, got {_dataset_fingerprint(ds)}")
    st = header["meta"]["settings"]
    size, level = st["patch_size"], st["level"]
    if level >= ds.levels or size > min(ds.dims[level]):
        raise ArtifactMismatchError(f"patch size {size} at level {level} does not fit this pyramid")
    os_ = seg_config_from_dict(header["meta"]["seg_cfg"]).output_stride
    if size % os_:
        raise ArtifactMismatchError(f"patch size {size} not divisible by output stride {os_}")
