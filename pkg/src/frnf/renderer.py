"""Pinhole rays, quadrature sampling, termination weights, and view rendering.

Depth, latent features, and semantic logits are all rendered as weighted
sums along each ray. Target-dimension features are produced by upsampling
the rendered latent once per ray, never per sample, which is what keeps the
transient footprint at O(N_bins * h + k) instead of O(N_bins * k).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import scene_field as sf
from .errors import ConfigError, NumericError

DEFAULT_N_BINS = 32

# rays per forward sub-batch when rendering whole views; bounds peak memory
# without affecting per-pixel results (see diffcore.chunked_matmul)
_VIEW_RAY_CHUNK = 2048


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ConfigError(f"require 0 < near < far, got near={self.near} far={self.far}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be >= 1, got {self.width}x{self.height}")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ConfigError("pose needs a 3x3 rotation and a 3-vector translation")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-5:
            raise ConfigError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise ConfigError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ConfigError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(rotation=m[:3, :3], translation=m[:3, 3])


def generate_rays(cam: Camera, pose: Pose, us: np.ndarray, vs: np.ndarray):
    """World-space rays through (possibly fractional) pixel coordinates."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    d_cam = np.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1
    )
    d_world = np.einsum("ij,nj->ni", pose.rotation, d_cam)
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, d_world.shape).copy()
    return origins.astype(np.float32), d_world.astype(np.float32)


def generate_ray(cam: Camera, pose: Pose, u: float, v: float):
    o, d = generate_rays(cam, pose, np.array([u]), np.array([v]))
    return o[0], d[0]


def sample_bins(
    cam: Camera,
    mode: str,
    n_bins: int = DEFAULT_N_BINS,
    rng: Optional[np.random.Generator] = None,
    n_rays: Optional[int] = None,
):
    """Depths and spacings over the camera's [near, far] range; see
    :func:`sample_bins_range`."""
    return sample_bins_range(cam.near, cam.far, mode, n_bins, rng=rng, n_rays=n_rays)


def sample_bins_range(
    near: float,
    far: float,
    mode: str,
    n_bins: int = DEFAULT_N_BINS,
    rng: Optional[np.random.Generator] = None,
    n_rays: Optional[int] = None,
):
    """Depths and spacings over [near, far] split into equal bins.

    ``midpoint`` returns bin centers, shape (n_bins,). ``stratified`` draws
    one uniform sample per bin per ray, shape (n_rays, n_bins); draws are
    kept strictly inside each bin so spacings stay positive in float32.
    The last spacing is far - d_N (no infinite tail).
    """
    if n_bins < 1:
        raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
    near = np.float32(near)
    far = np.float32(far)
    width = (far - near) / np.float32(n_bins)
    edges = near + width * np.arange(n_bins + 1, dtype=np.float32)
    if mode == "midpoint":
        depths = edges[:-1] + np.float32(0.5) * width
    elif mode == "stratified":
        if rng is None or n_rays is None:
            raise ConfigError("stratified mode needs rng and n_rays")
        u = rng.random((n_rays, n_bins), dtype=np.float32) * np.float32(0.999)
        depths = edges[:-1] + width * u
    else:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    deltas = np.empty_like(depths)
    deltas[..., :-1] = depths[..., 1:] - depths[..., :-1]
    deltas[..., -1] = far - depths[..., -1]
    return depths, deltas


def compute_weights(rho: np.ndarray, delta: np.ndarray):
    """Termination probabilities and rendering weights along rays.

    o_i = 1 - exp(-rho_i * delta_i); w_i = o_i * prod_{j<i} (1 - o_j),
    cumulative product taken left to right over the last axis.
    """
    rho = np.asarray(rho)
    delta = np.asarray(delta)
    if np.any(rho < 0):
        raise NumericError("negative density in compute_weights")
    o, w, _ = _weights_with_trans(rho, delta)
    return o, w


def _weights_with_trans(rho, delta):
    o = 1.0 - np.exp(-rho * delta)
    trans = np.cumprod(1.0 - o, axis=-1)  # T_{i+1}: transmittance after sample i
    excl = np.concatenate([np.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    return o, o * excl, trans


def weights_backward(delta: np.ndarray, w: np.ndarray, trans_incl: np.ndarray, g: np.ndarray):
    """dLoss/drho from per-sample weight gradients g = dLoss/dw.

    Uses w_l = o_l * exp(-sum_{j<l} rho_j delta_j), so
    dL/drho_i = delta_i * (g_i * T_{i+1} - sum_{l>i} g_l w_l),
    which is division-free and safe for opaque samples.
    """
    gw = g * w
    suffix = np.flip(np.cumsum(np.flip(gw, -1), -1), -1) - gw  # sum over l > i
    return delta * (g * trans_incl - suffix)


@dataclass
class RaySamples:
    """Per-ray quadrature record."""

    depths: np.ndarray
    deltas: np.ndarray
    densities: np.ndarray
    term_probs: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_densities(cls, depths, deltas, densities) -> "RaySamples":
        o, w = compute_weights(densities, deltas)
        return cls(np.asarray(depths), np.asarray(deltas), np.asarray(densities), o, w)


@dataclass
class AllocationMeter:
    """Counts floats allocated for per-sample feature storage.

    Only transient per-sample feature buffers are counted; density/weight
    buffers and final per-ray outputs are common to both rendering routes.
    """

    sample_floats: int = 0
    events: list = field(default_factory=list)

    def count(self, n_samples: int, dim: int) -> None:
        self.sample_floats += n_samples * dim
        self.events.append((n_samples, dim))


@dataclass
class RenderResult:
    depth: np.ndarray          # (R,)
    latent: np.ndarray | None  # (R, h)
    logits: np.ndarray | None  # (R, C_max)
    acc: np.ndarray            # (R,)
    weights: np.ndarray        # (R, N)
    trans: np.ndarray          # (R, N) inclusive transmittance
    clipped: np.ndarray        # (R,) bool, any sample clamped to the scene box
    sample_latent: np.ndarray | None
    sample_logits: np.ndarray | None
    field_cache: sf.ForwardCache | None
    bin_depths: np.ndarray
    bin_deltas: np.ndarray


def normalize_points(points: np.ndarray, bounds) -> tuple[np.ndarray, np.ndarray]:
    """Clamp world points to the scene box and map it to [-1, 1]^3."""
    lo, hi = bounds
    lo = np.asarray(lo, dtype=points.dtype)
    hi = np.asarray(hi, dtype=points.dtype)
    clamped = np.clip(points, lo, hi)
    was_clipped = np.any(clamped != points, axis=-1)
    center = (lo + hi) * points.dtype.type(0.5)
    half = (hi - lo) * points.dtype.type(0.5)
    return (clamped - center) / half, was_clipped


def trace_rays(
    params: sf.SceneParams,
    cfg: sf.FieldConfig,
    basis: sf.EncodingBasis,
    origins: np.ndarray,
    directions: np.ndarray,
    bin_depths: np.ndarray,
    bin_deltas: np.ndarray,
    bounds,
    want_latent: bool = False,
    want_semantic: bool = False,
    keep_cache: bool = False,
    meter: AllocationMeter | None = None,
) -> RenderResult:
    """Volumetric rendering of a batch of rays against the current field."""
    n_rays = origins.shape[0]
    depths = np.broadcast_to(bin_depths, (n_rays, bin_depths.shape[-1])).astype(np.float32, copy=False)
    deltas = np.broadcast_to(bin_deltas, depths.shape).astype(np.float32, copy=False)
    n_bins = depths.shape[1]

    pts = origins[:, None, :] + depths[..., None] * directions[:, None, :]
    norm_pts, clipped = normalize_points(pts.reshape(-1, 3), bounds)
    clipped = clipped.reshape(n_rays, n_bins).any(axis=1)

    rho, latent, logits, cache = sf.field_forward_batch(
        params, cfg, basis, norm_pts,
        want_latent=want_latent, want_semantic=want_semantic, keep_cache=keep_cache,
    )
    rho = rho.reshape(n_rays, n_bins)
    o, w, trans = _weights_with_trans(rho, deltas)
    depth_out = np.sum(w * depths, axis=1)
    acc = np.sum(w, axis=1)

    lat_out = log_out = sample_latent = sample_logits = None
    if want_latent:
        sample_latent = latent.reshape(n_rays, n_bins, -1)
        if meter is not None:
            meter.count(n_rays * n_bins, sample_latent.shape[-1])
        lat_out = np.einsum("rn,rnh->rh", w, sample_latent)
    if want_semantic:
        sample_logits = logits.reshape(n_rays, n_bins, -1)
        log_out = np.einsum("rn,rnc->rc", w, sample_logits)

    return RenderResult(
        depth=depth_out, latent=lat_out, logits=log_out, acc=acc,
        weights=w, trans=trans, clipped=clipped,
        sample_latent=sample_latent if keep_cache else None,
        sample_logits=sample_logits if keep_cache else None,
        field_cache=cache, bin_depths=depths, bin_deltas=deltas,
    )


def render_ray(params, cfg, basis, origin, direction, bin_depths, bin_deltas, bounds):
    """Single-ray render: (depth, latent, logits, acc)."""
    res = trace_rays(
        params, cfg, basis,
        np.asarray(origin, dtype=np.float32)[None, :],
        np.asarray(direction, dtype=np.float32)[None, :],
        np.asarray(bin_depths, dtype=np.float32),
        np.asarray(bin_deltas, dtype=np.float32),
        bounds, want_latent=True, want_semantic=True,
    )
    return float(res.depth[0]), res.latent[0], res.logits[0], float(res.acc[0])


def render_feature_pixels(
    params, cfg, basis, origins, directions, bin_depths, bin_deltas, bounds,
    meter: AllocationMeter | None = None,
):
    """Rendered latents upsampled to the target dimension, one row per ray."""
    res = trace_rays(
        params, cfg, basis, origins, directions, bin_depths, bin_deltas, bounds,
        want_latent=True, meter=meter,
    )
    return sf.upsample_features(params, res.latent)


def render_feature_pixel(params, cfg, basis, origin, direction, bin_depths, bin_deltas, bounds,
                         meter: AllocationMeter | None = None):
    return render_feature_pixels(
        params, cfg, basis,
        np.asarray(origin, dtype=np.float32)[None, :],
        np.asarray(direction, dtype=np.float32)[None, :],
        bin_depths, bin_deltas, bounds, meter=meter,
    )[0]


def render_feature_pixels_naive(
    params, cfg, basis, origins, directions, bin_depths, bin_deltas, bounds,
    meter: AllocationMeter | None = None,
):
    """Reference route: upsample every sample, then take the weighted sum.

    Materializes the k-wide buffer per sample; exists as the oracle for the
    latent-rendering contract and for the allocation comparison.
    """
    res = trace_rays(
        params, cfg, basis, origins, directions, bin_depths, bin_deltas, bounds,
        want_latent=True, keep_cache=True,
    )
    r, n, h = res.sample_latent.shape
    per_sample = sf.upsample_features(params, res.sample_latent.reshape(r * n, h))
    if meter is not None:
        meter.count(r * n, per_sample.shape[-1])
    per_sample = per_sample.reshape(r, n, -1)
    return np.einsum("rn,rnk->rk", res.weights, per_sample)


VIEW_MODES = ("depth", "semantic_argmax", "semantic_logits", "feature_latent", "feature_full")

VOID_LABEL = 65535


def render_view(
    params: sf.SceneParams,
    cfg: sf.FieldConfig,
    basis: sf.EncodingBasis,
    cam: Camera,
    pose: Pose,
    mode: str,
    bounds,
    stride: int = 1,
    n_bins: int = DEFAULT_N_BINS,
    n_active: int | None = None,
    meter: AllocationMeter | None = None,
):
    """Render every stride-th pixel with deterministic midpoint sampling.

    semantic_argmax breaks ties toward the lower class index and labels
    pixels with acc < 0.5 as VOID_LABEL.
    """
    if mode not in VIEW_MODES:
        raise ConfigError(f"unknown render mode {mode!r}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    us = np.arange(0, cam.width, stride)
    vs = np.arange(0, cam.height, stride)
    uu, vv = np.meshgrid(us, vs)
    h_out, w_out = vv.shape
    origins, dirs = generate_rays(cam, pose, uu.ravel(), vv.ravel())
    depths, deltas = sample_bins(cam, "midpoint", n_bins)

    want_latent = mode in ("feature_latent", "feature_full")
    want_semantic = mode in ("semantic_argmax", "semantic_logits")
    out_rows = []
    acc_rows = []
    for start in range(0, origins.shape[0], _VIEW_RAY_CHUNK):
        sl = slice(start, min(start + _VIEW_RAY_CHUNK, origins.shape[0]))
        res = trace_rays(params, cfg, basis, origins[sl], dirs[sl], depths, deltas, bounds,
                         want_latent=want_latent, want_semantic=want_semantic, meter=meter)
        acc_rows.append(res.acc)
        if mode == "depth":
            out_rows.append(res.depth)
        elif mode == "feature_latent":
            out_rows.append(res.latent)
        elif mode == "feature_full":
            out_rows.append(sf.upsample_features(params, res.latent))
        else:
            out_rows.append(res.logits)
    flat = np.concatenate(out_rows, axis=0)
    acc = np.concatenate(acc_rows, axis=0)

    if mode == "depth":
        return flat.reshape(h_out, w_out)
    if mode in ("feature_latent", "feature_full"):
        return flat.reshape(h_out, w_out, -1)
    n_act = cfg.max_classes if n_active is None else n_active
    logits = flat[:, :n_act]
    if mode == "semantic_logits":
        return logits.reshape(h_out, w_out, n_act)
    if n_act == 0:
        return np.full((h_out, w_out), VOID_LABEL, dtype=np.int64)
    labels = np.argmax(logits, axis=1).astype(np.int64)
    labels[acc < 0.5] = VOID_LABEL
    return labels.reshape(h_out, w_out)
