"""Online mapping: keyframes, supervision sampling, the joint loss, training.

One mapping step selects a few keyframes, samples depth pixels uniformly,
feature cells from the coarse maps, and click pixels, renders them against
the current field, and applies one Adam update from the hand-written
backward pass. All randomness is drawn from per-step generators seeded by
(run seed, step index), so runs are bitwise reproducible.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import renderer as rnd
from . import scene_field as sf
from .diffcore import AdamConfig, adam_step
from .errors import ConfigError, DecisionError, NumericError, StateError
from .features import FeatureMap, feature_cells_to_rays
from .renderer import Camera, Pose, generate_rays, sample_bins, trace_rays, weights_backward
from .semantics import ClickRegistry


@dataclass
class Frame:
    """Posed depth frame with its coarse feature map and any click labels."""

    frame_id: int
    pose: Pose
    depth: np.ndarray  # (H, W) float32, 0 = invalid
    features: FeatureMap
    clicks: list[tuple[int, int, int]] = field(default_factory=list)  # (u, v, class_id)


@dataclass(frozen=True)
class MapperConfig:
    kf_rel_error_threshold: float = 0.1
    kf_pixel_fraction: float = 0.65
    n_depth_samples: int = 200
    n_feature_samples: int = 64
    n_keyframes_per_step: int = 4
    lambda_depth: float = 1.0
    lambda_feat: float = 1.0
    lambda_sem: float = 1.0
    steps_per_frame: int = 10
    kf_eval_stride: int = 8
    n_bins: int = rnd.DEFAULT_N_BINS

    def __post_init__(self):
        if not 0 < self.kf_pixel_fraction < 1:
            raise ConfigError("kf_pixel_fraction must lie in (0, 1)")
        if self.kf_rel_error_threshold <= 0:
            raise ConfigError("kf_rel_error_threshold must be positive")
        if min(self.lambda_depth, self.lambda_feat, self.lambda_sem) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class TrainState:
    """Single-writer training state; owned by exactly one mapping thread."""

    params: sf.SceneParams
    field_cfg: sf.FieldConfig
    basis: sf.EncodingBasis
    cam: Camera
    bounds: tuple
    adam: AdamConfig
    registry: ClickRegistry
    keyframes: list[Frame] = field(default_factory=list)
    step: int = 0
    seed: int = 0


def make_train_state(cam: Camera, bounds, *, target_feature_dim: int = 1536,
                     max_classes: int = 16, seed: int = 0,
                     adam: AdamConfig | None = None) -> TrainState:
    cfg = sf.FieldConfig(target_feature_dim=target_feature_dim, max_classes=max_classes)
    basis = sf.make_basis("axes_plus_icosahedron", 6)
    params = sf.init_scene_params(cfg, basis, seed)
    return TrainState(
        params=params, field_cfg=cfg, basis=basis, cam=cam, bounds=bounds,
        adam=adam or AdamConfig(), registry=ClickRegistry(max_classes=max_classes,
                                                          frame_size=(cam.width, cam.height)),
        seed=seed,
    )


def keyframe_decision(rendered_depth: np.ndarray, measured_depth: np.ndarray,
                      cfg: MapperConfig) -> bool:
    """True iff the relative depth error exceeds the threshold on more than
    the configured fraction of valid pixels (both inequalities strict)."""
    rendered = np.asarray(rendered_depth, dtype=np.float64).ravel()
    measured = np.asarray(measured_depth, dtype=np.float64).ravel()
    valid = measured > 0
    if not valid.any():
        raise DecisionError("no valid pixels to evaluate the keyframe rule on")
    err = np.abs(rendered[valid] - measured[valid]) / measured[valid]
    frac = float(np.mean(err > cfg.kf_rel_error_threshold))
    return frac > cfg.kf_pixel_fraction


def sample_depth_pixels(cam: Camera, n: int, seed) -> np.ndarray:
    """(n, 2) i.i.d. uniform integer (u, v) pixel coordinates."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.integers(0, cam.width, size=n)
    v = rng.integers(0, cam.height, size=n)
    return np.stack([u, v], axis=1)


@dataclass
class SupervisionItem:
    keyframe: Frame
    depth_pixels: np.ndarray    # (n, 2) int (u, v)
    feature_cells: np.ndarray   # (m, 2) int (row, col)
    clicks: list[tuple[int, int, int]]


def select_supervision(keyframes: list[Frame], n_keyframes_per_step: int,
                       seed, n_depth_samples: int = 200,
                       n_feature_samples: int = 64,
                       cam: Camera | None = None) -> list[SupervisionItem]:
    """Pick the latest keyframe plus uniform others, with their pixel draws."""
    if not keyframes:
        raise StateError("keyframe set is empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    latest = len(keyframes) - 1
    others = np.arange(latest)
    n_extra = min(n_keyframes_per_step - 1, latest)
    chosen = [latest]
    if n_extra > 0:
        chosen += sorted(int(i) for i in rng.choice(others, size=n_extra, replace=False))

    n_sel = len(chosen)
    base, rem = divmod(n_depth_samples, n_sel)
    depth_counts = [base + (1 if i < rem else 0) for i in range(n_sel)]

    pools = []
    for ki in chosen:
        cells = keyframes[ki].features.valid_cells()
        pools.append(cells)
    total_cells = sum(len(p) for p in pools)
    budget = min(n_feature_samples, total_cells)
    flat_idx = rng.choice(total_cells, size=budget, replace=False) if total_cells else np.array([], int)

    items = []
    offset = 0
    for slot, ki in enumerate(chosen):
        kf = keyframes[ki]
        cam_ = cam
        dp = sample_depth_pixels(cam_, depth_counts[slot], rng) if depth_counts[slot] > 0 and cam_ else np.zeros((0, 2), int)
        local = flat_idx[(flat_idx >= offset) & (flat_idx < offset + len(pools[slot]))] - offset
        cells = pools[slot][np.sort(local)] if len(local) else np.zeros((0, 2), int)
        offset += len(pools[slot])
        items.append(SupervisionItem(kf, dp, cells, list(kf.clicks)))
    return items


@dataclass
class RayGroup:
    origins: np.ndarray
    dirs: np.ndarray
    bin_depths: np.ndarray
    bin_deltas: np.ndarray

    @property
    def n(self) -> int:
        return self.origins.shape[0]


@dataclass
class RayBatch:
    depth: RayGroup
    depth_targets: np.ndarray       # (n,)
    feat: RayGroup
    feat_targets: np.ndarray        # (m, k)
    sem: RayGroup
    sem_targets: np.ndarray         # (c,) int class ids
    n_active: int


def _empty_group(n_bins: int) -> RayGroup:
    z3 = np.zeros((0, 3), np.float32)
    zb = np.zeros((0, n_bins), np.float32)
    return RayGroup(z3, z3.copy(), zb, zb.copy())


def build_batch(items: list[SupervisionItem], cam: Camera, mcfg: MapperConfig,
                rng: np.random.Generator, n_active: int) -> RayBatch:
    """Materialize supervision picks into ray groups with frozen bins."""
    d_orig, d_dir, d_tgt = [], [], []
    f_orig, f_dir, f_tgt = [], [], []
    s_orig, s_dir, s_tgt = [], [], []
    for item in items:
        kf = item.keyframe
        if len(item.depth_pixels):
            px = item.depth_pixels
            targets = kf.depth[px[:, 1], px[:, 0]]
            keep = targets > 0  # invalid depth contributes no depth loss
            if keep.any():
                o, d = generate_rays(cam, kf.pose, px[keep, 0], px[keep, 1])
                d_orig.append(o)
                d_dir.append(d)
                d_tgt.append(targets[keep].astype(np.float32))
        if len(item.feature_cells):
            uv = feature_cells_to_rays(item.feature_cells, kf.features, cam)
            o, d = generate_rays(cam, kf.pose, uv[:, 0], uv[:, 1])
            f_orig.append(o)
            f_dir.append(d)
            f_tgt.append(kf.features.data[item.feature_cells[:, 0], item.feature_cells[:, 1]])
        for (u, v, cls) in item.clicks:
            o, d = generate_rays(cam, kf.pose, np.array([u]), np.array([v]))
            s_orig.append(o)
            s_dir.append(d)
            s_tgt.append(cls)

    def group(origs, dirs):
        if not origs:
            return _empty_group(mcfg.n_bins)
        o = np.concatenate(origs)
        d = np.concatenate(dirs)
        depths, deltas = sample_bins(cam, "stratified", mcfg.n_bins, rng=rng, n_rays=o.shape[0])
        return RayGroup(o, d, depths, deltas)

    dg = group(d_orig, d_dir)
    fg = group(f_orig, f_dir)
    sg = group(s_orig, s_dir)
    k = items[0].keyframe.features.dim if items else 0
    return RayBatch(
        depth=dg,
        depth_targets=np.concatenate(d_tgt) if d_tgt else np.zeros(0, np.float32),
        feat=fg,
        feat_targets=np.concatenate(f_tgt) if f_tgt else np.zeros((0, k), np.float32),
        sem=sg,
        sem_targets=np.asarray(s_tgt, dtype=np.int64),
        n_active=n_active,
    )


@dataclass
class LossReport:
    l_depth: float
    l_feat: float
    l_sem: float
    l_total: float


def _check_finite(value: float, component: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {component} loss")
    return float(value)


def _losses(params: sf.SceneParams, cfg: sf.FieldConfig, basis: sf.EncodingBasis,
            mcfg: MapperConfig, batch: RayBatch, bounds,
            with_grad: bool, dtype=np.float32) -> LossReport:
    def cast(group: RayGroup) -> RayGroup:
        if dtype == np.float32:
            return group
        return RayGroup(group.origins.astype(dtype), group.dirs.astype(dtype),
                        group.bin_depths.astype(dtype), group.bin_deltas.astype(dtype))

    l_depth = l_feat = l_sem = 0.0

    if batch.depth.n:
        g = cast(batch.depth)
        res = trace_rays(params, cfg, basis, g.origins, g.dirs, g.bin_depths, g.bin_deltas,
                         bounds, keep_cache=with_grad)
        diff = res.depth.astype(np.float64) - batch.depth_targets
        l_depth = _check_finite(np.mean(np.abs(diff)), "depth")
        if with_grad:
            # ray-level backward runs in float64: the cumulative-sum and
            # cancellation steps are cheap but rounding-sensitive
            d_hat = mcfg.lambda_depth * np.sign(diff) / g.n
            g_w = d_hat[:, None] * res.bin_depths.astype(np.float64)
            d_rho = weights_backward(res.bin_deltas.astype(np.float64),
                                     res.weights.astype(np.float64),
                                     res.trans.astype(np.float64), g_w)
            sf.field_backward(params, cfg, res.field_cache,
                              d_rho.reshape(-1).astype(dtype), None, None)

    if batch.feat.n and mcfg.lambda_feat > 0:
        g = cast(batch.feat)
        res = trace_rays(params, cfg, basis, g.origins, g.dirs, g.bin_depths, g.bin_deltas,
                         bounds, want_latent=True, keep_cache=with_grad)
        rendered = sf.upsample_features(params, res.latent)
        diff = rendered.astype(np.float64) - batch.feat_targets
        l_feat = _check_finite(float(np.mean(np.sum(diff * diff, axis=1))), "feature")
        if with_grad:
            d_out = ((mcfg.lambda_feat * 2.0 / g.n) * diff).astype(dtype)
            d_latent_ray = sf.upsample_backward(params, res.latent, d_out).astype(np.float64)
            g_w = np.einsum("rh,rnh->rn", d_latent_ray,
                            res.sample_latent.astype(np.float64))
            d_rho = weights_backward(res.bin_deltas.astype(np.float64),
                                     res.weights.astype(np.float64),
                                     res.trans.astype(np.float64), g_w)
            d_f = res.weights[..., None].astype(np.float64) * d_latent_ray[:, None, :]
            sf.field_backward(params, cfg, res.field_cache,
                              d_rho.reshape(-1).astype(dtype),
                              d_f.reshape(-1, cfg.latent_dim).astype(dtype), None)

    if batch.sem.n and batch.n_active > 0 and mcfg.lambda_sem > 0:
        g = cast(batch.sem)
        res = trace_rays(params, cfg, basis, g.origins, g.dirs, g.bin_depths, g.bin_deltas,
                         bounds, want_semantic=True, keep_cache=with_grad)
        z = res.logits[:, : batch.n_active].astype(np.float64)
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
        picked = z[np.arange(g.n), batch.sem_targets]
        l_sem = _check_finite(float(np.mean(lse - picked)), "semantic")
        if with_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(g.n), batch.sem_targets] -= 1.0
            dz = (mcfg.lambda_sem / g.n) * p
            d_logits_ray = np.zeros((g.n, cfg.max_classes), dtype=np.float64)
            d_logits_ray[:, : batch.n_active] = dz
            g_w = np.einsum("rc,rnc->rn", d_logits_ray,
                            res.sample_logits.astype(np.float64))
            d_rho = weights_backward(res.bin_deltas.astype(np.float64),
                                     res.weights.astype(np.float64),
                                     res.trans.astype(np.float64), g_w)
            d_s = res.weights[..., None].astype(np.float64) * d_logits_ray[:, None, :]
            sf.field_backward(params, cfg, res.field_cache,
                              d_rho.reshape(-1).astype(dtype), None,
                              d_s.reshape(-1, cfg.max_classes).astype(dtype))

    l_total = (mcfg.lambda_depth * l_depth + mcfg.lambda_feat * l_feat
               + mcfg.lambda_sem * l_sem)
    return LossReport(float(l_depth), float(l_feat), float(l_sem), float(l_total))


def compute_losses(params: sf.SceneParams, cfg: sf.FieldConfig, basis: sf.EncodingBasis,
                   mcfg: MapperConfig, batch: RayBatch, bounds) -> LossReport:
    """Forward-only loss evaluation on a frozen batch."""
    if batch.depth.n == 0 and batch.feat.n == 0 and batch.sem.n == 0:
        raise StateError("empty supervision batch")
    return _losses(params, cfg, basis, mcfg, batch, bounds, with_grad=False)


def compute_losses_and_grads(params, cfg, basis, mcfg, batch, bounds) -> LossReport:
    """Loss plus gradient accumulation into the parameter blocks."""
    return _losses(params, cfg, basis, mcfg, batch, bounds, with_grad=True)


def make_loss_fn(params, cfg, basis, mcfg, batch, bounds, *, eval_dtype=np.float64,
                 with_grad: bool = False):
    """Closure for finite-difference checks over the full loss."""

    def fn() -> float:
        if with_grad:
            params.zero_grads()
            return _losses(params, cfg, basis, mcfg, batch, bounds, True).l_total
        return _losses(params, cfg, basis, mcfg, batch, bounds, False, dtype=eval_dtype).l_total

    return fn


@dataclass
class StepMetrics:
    step: int
    l_depth: float
    l_feat: float
    l_sem: float
    l_total: float
    n_keyframes: int
    ms: float

    def record(self) -> dict:
        return {"step": self.step, "L_depth": self.l_depth, "L_feat": self.l_feat,
                "L_sem": self.l_sem, "L_total": self.l_total,
                "n_keyframes": self.n_keyframes, "ms": self.ms}


def mapping_step(state: TrainState, mcfg: MapperConfig) -> StepMetrics:
    """One optimization step: select, render, backprop, Adam update."""
    t0 = time.perf_counter()
    rng = np.random.default_rng([state.seed, state.step])
    items = select_supervision(state.keyframes, mcfg.n_keyframes_per_step, rng,
                               n_depth_samples=mcfg.n_depth_samples,
                               n_feature_samples=mcfg.n_feature_samples, cam=state.cam)
    batch = build_batch(items, state.cam, mcfg, rng, state.registry.n_active_classes)
    state.params.zero_grads()
    report = compute_losses_and_grads(state.params, state.field_cfg, state.basis,
                                      mcfg, batch, state.bounds)
    for blk in state.params.all_blocks():
        adam_step(blk, state.adam)
    state.step += 1
    ms = (time.perf_counter() - t0) * 1e3
    return StepMetrics(state.step, report.l_depth, report.l_feat, report.l_sem,
                       report.l_total, len(state.keyframes), ms)


def ingest_frame(state: TrainState, frame: Frame, mcfg: MapperConfig) -> dict:
    """Apply the keyframe rule to an incoming frame; first frame always joins."""
    if not state.keyframes:
        state.keyframes.append(frame)
        return {"added_keyframe": True}
    preview = rnd.render_view(state.params, state.field_cfg, state.basis, state.cam,
                              frame.pose, "depth", state.bounds,
                              stride=mcfg.kf_eval_stride, n_bins=mcfg.n_bins)
    measured = frame.depth[:: mcfg.kf_eval_stride, :: mcfg.kf_eval_stride]
    try:
        add = keyframe_decision(preview, measured, mcfg)
    except DecisionError:
        add = True
    if add:
        state.keyframes.append(frame)
    return {"added_keyframe": add}


class FrameQueue:
    """Bounded frame queue: the producer drops the oldest frame on overflow."""

    def __init__(self, capacity: int = 4):
        self._items: deque = deque()
        self.capacity = capacity
        self.dropped = 0
        self._lock = threading.Lock()

    def push(self, frame: Frame) -> None:
        with self._lock:
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(frame)

    def pop(self) -> Optional[Frame]:
        with self._lock:
            return self._items.popleft() if self._items else None

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)
