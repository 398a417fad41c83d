"""Scene representation: encoding, coordinate MLP, heads, and upsampler.

A point in normalized scene coordinates is expanded with an off-axis
sinusoidal encoding, pushed through a small ReLU MLP with one skip
concatenation, and read out by three heads: density (softplus), a latent
feature vector, and semantic logits. A separate affine map upsamples a
rendered latent to the target feature dimension after volumetric rendering,
so the wide target features are never materialized per sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import expit

from .diffcore import ParamBlock, chunked_matmul, init_params
from .errors import ConfigError, DimensionError, FormatError

CHECKPOINT_MAGIC = b"FRNF1"

# fixed chunk row count for the h->k upsampler (k is wide, keep tiles small)
UPSAMPLE_CHUNK = 64


@dataclass(frozen=True)
class EncodingBasis:
    """Unit projection directions and per-direction frequency count."""

    directions: np.ndarray  # (m, 3) unit rows, float64
    n_frequencies: int

    @property
    def n_directions(self) -> int:
        return self.directions.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.n_directions * self.n_frequencies


def _icosahedral_directions() -> np.ndarray:
    """The 10 upper-hemisphere face directions of a regular icosahedron.

    These are the dodecahedron vertex directions; one representative per
    antipodal pair, chosen by lexicographic positivity of (z, y, x).
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    inv = 1.0 / phi
    verts = []
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sz in (1.0, -1.0):
                verts.append((sx, sy, sz))
    for a, b in [(inv, phi), (inv, -phi), (-inv, phi), (-inv, -phi)]:
        verts.append((0.0, a, b))
        verts.append((a, b, 0.0))
        verts.append((b, 0.0, a))
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    keep = (v[:, 2] > 1e-12) | (
        (np.abs(v[:, 2]) <= 1e-12) & ((v[:, 1] > 1e-12) | ((np.abs(v[:, 1]) <= 1e-12) & (v[:, 0] > 0)))
    )
    v = v[keep]
    order = np.lexsort((-v[:, 0], -v[:, 1], -v[:, 2]))
    v = v[order]
    assert v.shape == (10, 3)
    return v


def make_basis(kind: str, n_frequencies: int) -> EncodingBasis:
    """Deterministic encoding basis: 3 coordinate axes + 10 icosahedral directions."""
    if kind != "axes_plus_icosahedron":
        raise ConfigError(f"unknown basis kind {kind!r}")
    if n_frequencies < 1:
        raise ConfigError(f"n_frequencies must be >= 1, got {n_frequencies}")
    dirs = np.vstack([np.eye(3, dtype=np.float64), _icosahedral_directions()])
    return EncodingBasis(directions=dirs, n_frequencies=int(n_frequencies))


def encode_positions(points: np.ndarray, basis: EncodingBasis) -> np.ndarray:
    """Sinusoidal encoding of (n, 3) points; output (n, 2*m*L).

    Layout is frequency-major then direction: entry 2*(l*m + j) is
    sin(2^l * pi * (a_j . p)) and the next entry is the matching cosine.
    """
    pts = np.asarray(points)
    dtype = pts.dtype
    dirs = basis.directions.astype(dtype)
    proj = np.einsum("ni,mi->nm", pts, dirs)  # einsum keeps rows batch-independent
    freqs = (np.pi * 2.0 ** np.arange(basis.n_frequencies)).astype(dtype)
    ang = proj[:, None, :] * freqs[None, :, None]  # (n, L, m)
    out = np.empty(ang.shape + (2,), dtype=dtype)
    np.sin(ang, out=out[..., 0])
    np.cos(ang, out=out[..., 1])
    return out.reshape(pts.shape[0], basis.out_dim)


def encode_position(p: np.ndarray, basis: EncodingBasis) -> np.ndarray:
    return encode_positions(np.asarray(p, dtype=np.float32)[None, :], basis)[0]


@dataclass(frozen=True)
class FieldConfig:
    hidden_dim: int = 256
    n_hidden_layers: int = 4
    latent_dim: int = 256
    target_feature_dim: int = 1536
    max_classes: int = 16
    skip_layer: int = 2

    def __post_init__(self):
        if self.latent_dim != self.hidden_dim:
            raise ConfigError("latent_dim must equal hidden_dim")
        if self.target_feature_dim < 1:
            raise ConfigError("target_feature_dim must be >= 1")
        if self.max_classes < 2:
            raise ConfigError("max_classes must be >= 2")
        if not 0 < self.skip_layer < self.n_hidden_layers:
            raise ConfigError("skip_layer must be an interior hidden-layer index")


class SceneParams:
    """All trainable blocks of the coordinate MLP and the upsampler."""

    def __init__(self, layers, head_density, head_latent, head_semantic, upsampler):
        self.layers: list[tuple[ParamBlock, ParamBlock]] = layers
        self.head_density: tuple[ParamBlock, ParamBlock] = head_density
        self.head_latent: tuple[ParamBlock, ParamBlock] = head_latent
        self.head_semantic: tuple[ParamBlock, ParamBlock] = head_semantic
        self.upsampler: tuple[ParamBlock, ParamBlock] = upsampler

    def all_blocks(self) -> Iterator[ParamBlock]:
        for w, b in self.layers:
            yield w
            yield b
        for w, b in (self.head_density, self.head_latent, self.head_semantic, self.upsampler):
            yield w
            yield b

    def zero_grads(self) -> None:
        for b in self.all_blocks():
            b.zero_grad()

    def snapshot(self) -> "SceneParams":
        """Deep copy of values only; grads and optimizer state reset."""

        def clone(pair):
            out = []
            for blk in pair:
                z = np.zeros_like(blk.values)
                out.append(ParamBlock(blk.name, blk.values.copy(), z.copy(), z.copy(), z.copy(), 0))
            return tuple(out)

        return SceneParams(
            [clone(p) for p in self.layers],
            clone(self.head_density),
            clone(self.head_latent),
            clone(self.head_semantic),
            clone(self.upsampler),
        )


def _block_shapes(cfg: FieldConfig, enc_dim: int) -> list[tuple[str, int, int]]:
    h = cfg.hidden_dim
    shapes: list[tuple[str, int, int]] = []
    in_dim = enc_dim
    for i in range(cfg.n_hidden_layers):
        if i == cfg.skip_layer:
            in_dim += enc_dim
        shapes.append((f"mlp.w{i}", h, in_dim))
        shapes.append((f"mlp.b{i}", 1, h))
        in_dim = h
    shapes += [
        ("head_density.w", 1, h), ("head_density.b", 1, 1),
        ("head_latent.w", cfg.latent_dim, h), ("head_latent.b", 1, cfg.latent_dim),
        ("head_semantic.w", cfg.max_classes, h), ("head_semantic.b", 1, cfg.max_classes),
        ("upsampler.w", cfg.target_feature_dim, h), ("upsampler.b", 1, cfg.target_feature_dim),
    ]
    return shapes


def init_scene_params(cfg: FieldConfig, basis: EncodingBasis, seed: int) -> SceneParams:
    """Deterministic initialization; weights fan-in uniform, biases zero."""
    shapes = _block_shapes(cfg, basis.out_dim)
    child_seeds = np.random.SeedSequence(seed).generate_state(len(shapes))
    blocks: dict[str, ParamBlock] = {}
    for (name, rows, cols), s in zip(shapes, child_seeds):
        scheme = "zeros" if ".b" in name else "uniform_fanin"
        blk = init_params(int(s), rows, cols, scheme)
        blk.name = name
        blocks[name] = blk
    layers = [(blocks[f"mlp.w{i}"], blocks[f"mlp.b{i}"]) for i in range(cfg.n_hidden_layers)]
    return SceneParams(
        layers,
        (blocks["head_density.w"], blocks["head_density.b"]),
        (blocks["head_latent.w"], blocks["head_latent.b"]),
        (blocks["head_semantic.w"], blocks["head_semantic.b"]),
        (blocks["upsampler.w"], blocks["upsampler.b"]),
    )


def param_footprint(cfg: FieldConfig, basis: EncodingBasis) -> tuple[int, int]:
    """Exact trainable scalar count and float32 byte size."""
    count = sum(r * c for _, r, c in _block_shapes(cfg, basis.out_dim))
    return count, 4 * count


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x.dtype.type(0), x)


@dataclass
class ForwardCache:
    """Activations needed by the hand-written backward pass."""

    layer_inputs: list[np.ndarray]
    relu_masks: list[np.ndarray]
    hidden: np.ndarray
    rho_raw: np.ndarray
    latent: np.ndarray | None = None
    latent_unit: np.ndarray | None = None
    latent_rnorm: np.ndarray | None = None


# smoothing floor for the latent direction: keeps the normalization (and its
# gradient) finite at f = 0 while leaving ordinary magnitudes untouched
_NORM_EPS = 1e-6


def _vals(block: ParamBlock, dtype) -> np.ndarray:
    v = block.values
    return v if v.dtype == dtype else v.astype(dtype)


def field_forward_batch(
    params: SceneParams,
    cfg: FieldConfig,
    basis: EncodingBasis,
    points: np.ndarray,
    want_latent: bool = True,
    want_semantic: bool = True,
    keep_cache: bool = False,
):
    """Evaluate the field at (n, 3) normalized points.

    Returns (rho, latent, logits, cache); latent/logits are None when not
    requested, cache is None unless ``keep_cache``. Density is
    softplus-activated; latent and logits are raw affine outputs. The
    semantic head reads the latent feature vector, so one-click labels
    propagate along feature-space similarity rather than raw trunk state.
    """
    pts = np.asarray(points)
    dtype = pts.dtype
    enc = encode_positions(pts, basis)
    h = enc
    layer_inputs: list[np.ndarray] = []
    relu_masks: list[np.ndarray] = []
    for i, (w, b) in enumerate(params.layers):
        if i == cfg.skip_layer:
            h = np.concatenate([h, enc], axis=1)
        layer_inputs.append(h)
        z = chunked_matmul(h, _vals(w, dtype).T) + _vals(b, dtype)
        mask = z > 0
        h = np.where(mask, z, dtype.type(0))
        relu_masks.append(mask)

    wd, bd = params.head_density
    rho_raw = chunked_matmul(h, _vals(wd, dtype).T) + _vals(bd, dtype)
    rho = softplus(rho_raw)[:, 0]

    latent = None
    logits = unit = rnorm = None
    if want_latent or want_semantic:
        wl, bl = params.head_latent
        latent = chunked_matmul(h, _vals(wl, dtype).T) + _vals(bl, dtype)
    if want_semantic:
        ws, bs = params.head_semantic
        rnorm = upsampled_norm(params, latent)
        unit = latent / rnorm
        logits = chunked_matmul(unit, _vals(ws, dtype).T) + _vals(bs, dtype)

    cache = None
    if keep_cache:
        cache = ForwardCache(layer_inputs, relu_masks, h, rho_raw, latent, unit, rnorm)
    if not want_latent:
        latent = None
    return rho, latent, logits, cache


def upsampled_norm(params: SceneParams, latent: np.ndarray) -> np.ndarray:
    """Per-row norm of the upsampled feature, computed without leaving h-space.

    ||G(f)||^2 = f' (W'W) f + 2 (W'b) . f + ||b||^2, so the target-space
    magnitude costs one h x h product per point instead of a k-wide buffer.
    Smoothed at zero so the semantic normalization stays differentiable.
    """
    w, b = params.upsampler
    dtype = latent.dtype
    wv = _vals(w, dtype)
    bv = _vals(b, dtype)[0]
    gram = wv.T @ wv
    cross = wv.T @ bv
    const = bv @ bv
    fg = chunked_matmul(latent, gram)
    sq = np.sum(fg * latent, axis=1, keepdims=True) \
        + 2.0 * (latent @ cross)[:, None] + const
    return np.sqrt(np.maximum(sq, dtype.type(0)) + dtype.type(_NORM_EPS) ** 2)


def field_forward(params: SceneParams, cfg: FieldConfig, basis: EncodingBasis, p: np.ndarray):
    """Single-point forward: (rho, latent h-vector, logits C_max-vector)."""
    pt = np.asarray(p, dtype=np.float32)
    if pt.shape != (3,):
        raise ConfigError(f"expected a 3-vector, got shape {pt.shape}")
    rho, latent, logits, _ = field_forward_batch(params, cfg, basis, pt[None, :])
    return float(rho[0]), latent[0], logits[0]


def field_backward(
    params: SceneParams,
    cfg: FieldConfig,
    cache: ForwardCache,
    d_rho: np.ndarray | None,
    d_latent: np.ndarray | None,
    d_logits: np.ndarray | None,
) -> None:
    """Accumulate dLoss/dtheta into block grads for one forward batch.

    Positions are not trainable, so backpropagation stops at the encoding.
    The semantic head chains through the latent head.
    """
    h = cache.hidden
    dtype = h.dtype
    dh = np.zeros_like(h)

    if d_rho is not None:
        d_raw = (d_rho * expit(cache.rho_raw[:, 0])).astype(dtype, copy=False)[:, None]
        wd, bd = params.head_density
        wd.grads += d_raw.T @ h
        bd.grads += d_raw.sum(axis=0, keepdims=True)
        dh += d_raw @ _vals(wd, dtype)

    d_latent_total = None if d_latent is None else d_latent
    if d_logits is not None:
        ws, bs = params.head_semantic
        wu, bu = params.upsampler
        f, u, q = cache.latent, cache.latent_unit, cache.latent_rnorm
        ws.grads += d_logits.T @ u
        bs.grads += d_logits.sum(axis=0, keepdims=True)
        d_u = d_logits @ _vals(ws, dtype)
        alpha = np.sum(d_u * f, axis=1, keepdims=True)  # dLoss/dq * (-q^2)
        gram_dir = chunked_matmul(f, _vals(wu, dtype).T @ _vals(wu, dtype)) \
            + _vals(wu, dtype).T @ _vals(bu, dtype)[0]
        chained = d_u / q - (alpha / q ** 3) * gram_dir
        # the normalizer also moves with the upsampler; this group is small
        # (click rays), so materializing its k-wide activations is fine
        g_full = chunked_matmul(f, _vals(wu, dtype).T, chunk=UPSAMPLE_CHUNK) + _vals(bu, dtype)
        scale = (-alpha / q ** 3)
        wu.grads += (g_full * scale).T @ f
        bu.grads += (g_full * scale).sum(axis=0, keepdims=True)
        d_latent_total = chained if d_latent_total is None else d_latent_total + chained
    if d_latent_total is not None:
        wl, bl = params.head_latent
        wl.grads += d_latent_total.T @ h
        bl.grads += d_latent_total.sum(axis=0, keepdims=True)
        dh += d_latent_total @ _vals(wl, dtype)

    for i in range(cfg.n_hidden_layers - 1, -1, -1):
        w, b = params.layers[i]
        dz = np.where(cache.relu_masks[i], dh, dtype.type(0))
        w.grads += dz.T @ cache.layer_inputs[i]
        b.grads += dz.sum(axis=0, keepdims=True)
        if i == 0:
            break
        dh = dz @ _vals(w, dtype)
        if i == cfg.skip_layer:
            dh = dh[:, : cfg.hidden_dim]


def upsample_features(params: SceneParams, latent: np.ndarray) -> np.ndarray:
    """Affine map of (n, h) rendered latents to (n, k) target features."""
    w, b = params.upsampler
    dtype = latent.dtype
    return chunked_matmul(latent, _vals(w, dtype).T, chunk=UPSAMPLE_CHUNK) + _vals(b, dtype)


def upsample_feature(params: SceneParams, latent: np.ndarray) -> np.ndarray:
    """Single-vector form of :func:`upsample_features`."""
    lat = np.asarray(latent)
    if lat.ndim != 1:
        raise DimensionError(f"expected a 1-d latent, got shape {lat.shape}")
    return upsample_features(params, lat[None, :])[0]


def upsample_backward(params: SceneParams, latent: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Accumulate upsampler grads; returns dLoss/dlatent."""
    w, b = params.upsampler
    w.grads += d_out.T @ latent
    b.grads += d_out.sum(axis=0, keepdims=True)
    return d_out @ _vals(w, latent.dtype)


# ---------------------------------------------------------------------------
# checkpoint format: magic, config as little-endian u32, then per block
# (name length u32, name bytes, rows u32, cols u32, rows*cols f32 LE)
# ---------------------------------------------------------------------------

_CFG_FIELDS = ("hidden_dim", "n_hidden_layers", "latent_dim",
               "target_feature_dim", "max_classes", "skip_layer")


def save_checkpoint(path, cfg: FieldConfig, params: SceneParams) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<6I", *(getattr(cfg, name) for name in _CFG_FIELDS)))
        for blk in params.all_blocks():
            name = blk.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<II", blk.rows, blk.cols))
            f.write(np.ascontiguousarray(blk.values, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[FieldConfig, SceneParams]:
    """Parse a checkpoint; optimizer state comes back zeroed."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if need(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    cfg_vals = struct.unpack("<6I", need(24, "config"))
    cfg = FieldConfig(**dict(zip(_CFG_FIELDS, (int(v) for v in cfg_vals))))

    raw: dict[str, ParamBlock] = {}
    while pos < len(data):
        (name_len,) = struct.unpack("<I", need(4, "block name length"))
        name = need(name_len, "block name").decode("utf-8")
        rows, cols = struct.unpack("<II", need(8, f"shape of {name}"))
        payload = need(4 * rows * cols, f"values of {name}")
        values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
        z = lambda: np.zeros((rows, cols), dtype=np.float32)
        raw[name] = ParamBlock(name, values, z(), z(), z(), 0)

    enc_dim = raw["mlp.w0"].cols if "mlp.w0" in raw else 0
    expected = _block_shapes(cfg, enc_dim)
    missing = [n for n, _, _ in expected if n not in raw]
    if missing:
        raise FormatError(f"checkpoint missing blocks {missing}", offset=pos)
    for name, rows, cols in expected:
        blk = raw[name]
        if (blk.rows, blk.cols) != (rows, cols):
            raise FormatError(
                f"block {name} has shape {blk.rows}x{blk.cols}, expected {rows}x{cols}", offset=pos
            )
    layers = [(raw[f"mlp.w{i}"], raw[f"mlp.b{i}"]) for i in range(cfg.n_hidden_layers)]
    params = SceneParams(
        layers,
        (raw["head_density.w"], raw["head_density.b"]),
        (raw["head_latent.w"], raw["head_latent.b"]),
        (raw["head_semantic.w"], raw["head_semantic.b"]),
        (raw["upsampler.w"], raw["upsampler.b"]),
    )
    return cfg, params
