"""Coarse feature-map ingestion, geometry, and the synthetic feature oracle.

Feature maps arrive from an external 2D front-end at a much coarser
resolution than the depth stream. This module owns the on-disk FMAP format,
the padding-frame crop, the mapping from coarse cells to full-resolution
rays, bilinear queries, and a deterministic oracle that stands in for a
real front-end on synthetic scenes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, InputError, NumericError, QueryError
from .renderer import Camera

FMAP_MAGIC = b"FMAP1"


@dataclass
class FeatureMap:
    """Coarse k-dimensional feature raster with validity mask."""

    data: np.ndarray        # (H', W', k) float32
    valid_mask: np.ndarray  # (H', W') bool
    source_frame: int = 0

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def valid_cells(self) -> np.ndarray:
        """(n, 2) array of valid (row, col) indices."""
        return np.argwhere(self.valid_mask)


def save_feature_map(path, fmap: FeatureMap) -> None:
    with open(path, "wb") as f:
        f.write(FMAP_MAGIC)
        f.write(struct.pack("<4I", fmap.height, fmap.width, fmap.dim, fmap.source_frame))
        f.write(fmap.valid_mask.astype(np.uint8).tobytes())
        f.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def load_feature_map(path) -> FeatureMap:
    """Parse an FMAP file; rejects truncation, trailing bytes, bad masks,
    and non-finite entries at valid cells."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated feature map while reading {what}", offset=pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if need(len(FMAP_MAGIC), "magic") != FMAP_MAGIC:
        raise FormatError("bad feature-map magic", offset=0)
    h, w, k, frame_id = struct.unpack("<4I", need(16, "header"))
    if h < 1 or w < 1 or k < 1:
        raise FormatError(f"degenerate dimensions {h}x{w}x{k}", offset=5)
    mask_off = pos
    mask_raw = np.frombuffer(need(h * w, "valid mask"), dtype=np.uint8)
    bad = np.nonzero(mask_raw > 1)[0]
    if bad.size:
        raise FormatError("valid mask byte is not 0/1", offset=mask_off + int(bad[0]))
    data_off = pos
    payload = need(4 * h * w * k, "feature payload")
    if pos != len(data):
        raise FormatError("trailing bytes after feature payload", offset=pos)
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, k).astype(np.float32)
    mask = mask_raw.reshape(h, w).astype(bool)
    finite = np.isfinite(values).all(axis=2)
    bad_cells = np.argwhere(mask & ~finite)
    if bad_cells.size:
        i, j = bad_cells[0]
        raise FormatError(
            f"non-finite feature at valid cell ({i}, {j})",
            offset=data_off + 4 * ((int(i) * w + int(j)) * k),
        )
    return FeatureMap(data=values, valid_mask=mask, source_frame=int(frame_id))


def crop_padding(fmap: FeatureMap, margin_h: int = 1, margin_w: int = 2) -> FeatureMap:
    """Invalidate the outer margin of the mask; data stays untouched."""
    if 2 * margin_h >= fmap.height or 2 * margin_w >= fmap.width:
        raise DimensionError(
            f"margins {margin_h}x{margin_w} too large for a {fmap.height}x{fmap.width} map"
        )
    mask = fmap.valid_mask.copy()
    if margin_h > 0:
        mask[:margin_h, :] = False
        mask[-margin_h:, :] = False
    if margin_w > 0:
        mask[:, :margin_w] = False
        mask[:, -margin_w:] = False
    return FeatureMap(data=fmap.data, valid_mask=mask, source_frame=fmap.source_frame)


def feature_pixel_to_ray(i: int, j: int, fmap: FeatureMap, cam: Camera) -> tuple[float, float]:
    """Full-resolution pixel coordinates of coarse cell (i, j)'s center ray."""
    if not (0 <= i < fmap.height and 0 <= j < fmap.width) or not fmap.valid_mask[i, j]:
        raise QueryError(f"feature cell ({i}, {j}) is invalid or out of bounds")
    u = (j + 0.5) * cam.width / fmap.width
    v = (i + 0.5) * cam.height / fmap.height
    return u, v


def feature_cells_to_rays(cells: np.ndarray, fmap: FeatureMap, cam: Camera) -> np.ndarray:
    """(n, 2) cell indices to (n, 2) full-resolution (u, v) ray coordinates."""
    cells = np.asarray(cells)
    u = (cells[:, 1] + 0.5) * cam.width / fmap.width
    v = (cells[:, 0] + 0.5) * cam.height / fmap.height
    return np.stack([u, v], axis=1)


def bilinear_query(fmap: FeatureMap, zeta) -> np.ndarray:
    """Bilinear feature lookup at normalized position zeta in [0, 1]^2.

    zeta maps linearly onto cell centers: (0, 0) is the center of cell
    (0, 0), (1, 1) the center of the last cell. Invalid neighbors are
    dropped and the remaining weights renormalized.
    """
    zx, zy = float(zeta[0]), float(zeta[1])
    if not (0.0 <= zx <= 1.0 and 0.0 <= zy <= 1.0):
        raise InputError(f"zeta must lie in [0,1]^2, got {(zx, zy)}")
    x = zx * (fmap.width - 1)
    y = zy * (fmap.height - 1)
    j0, i0 = int(np.floor(x)), int(np.floor(y))
    j0 = min(j0, fmap.width - 2) if fmap.width > 1 else 0
    i0 = min(i0, fmap.height - 2) if fmap.height > 1 else 0
    fx, fy = x - j0, y - i0
    corners = []
    for di, dj, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        ii, jj = i0 + di, j0 + dj
        if ii < fmap.height and jj < fmap.width and fmap.valid_mask[ii, jj]:
            corners.append((ii, jj, wgt))
    if not corners:
        raise QueryError(f"no valid neighbors around zeta {(zx, zy)}")
    total = sum(wgt for _, _, wgt in corners)
    if total <= 0.0:
        # the only valid corners carry zero bilinear weight (query pinned to
        # an invalid edge); average them instead of dividing by zero
        corners = [(ii, jj, 1.0) for ii, jj, _ in corners]
        total = float(len(corners))
    out = np.zeros(fmap.dim, dtype=np.float64)
    for ii, jj, wgt in corners:
        out += (wgt / total) * fmap.data[ii, jj].astype(np.float64)
    return out.astype(np.float32)


def clamp_zeta_to_valid(fmap: FeatureMap, zeta) -> tuple[float, float]:
    """Clamp a normalized query position into the map's valid bounding box.

    Used when a click lands inside the cropped padding frame: the nearest
    valid feature is the sensible anchor.
    """
    rows = np.nonzero(fmap.valid_mask.any(axis=1))[0]
    cols = np.nonzero(fmap.valid_mask.any(axis=0))[0]
    if rows.size == 0:
        raise QueryError("feature map has no valid cells")
    lo_x = cols[0] / max(fmap.width - 1, 1)
    hi_x = cols[-1] / max(fmap.width - 1, 1)
    lo_y = rows[0] / max(fmap.height - 1, 1)
    hi_y = rows[-1] / max(fmap.height - 1, 1)
    return (float(np.clip(zeta[0], lo_x, hi_x)), float(np.clip(zeta[1], lo_y, hi_y)))


@dataclass(frozen=True)
class FeatureOracleSpec:
    """Synthetic front-end: one unit embedding per class plus background.

    ``class_embeddings`` has one row per scene class and a final row used
    for background cells.
    """

    class_embeddings: np.ndarray  # (n_classes + 1, k) unit rows
    noise_sigma: float
    coarse_h: int
    coarse_w: int

    @property
    def dim(self) -> int:
        return self.class_embeddings.shape[1]


def sample_class_embeddings(n: int, k: int, seed: int, max_cos: float = 0.3) -> np.ndarray:
    """Rejection-sample n unit vectors with pairwise |cosine| below max_cos."""
    rng = np.random.default_rng(seed)
    rows: list[np.ndarray] = []
    while len(rows) < n:
        v = rng.standard_normal(k)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ r)) < max_cos for r in rows):
            rows.append(v)
    return np.asarray(rows, dtype=np.float32)


def make_oracle_spec(n_classes: int, k: int, seed: int, noise_sigma: float = 0.1,
                     coarse_h: int = 22, coarse_w: int = 38) -> FeatureOracleSpec:
    emb = sample_class_embeddings(n_classes + 1, k, seed)
    return FeatureOracleSpec(class_embeddings=emb, noise_sigma=float(noise_sigma),
                             coarse_h=coarse_h, coarse_w=coarse_w)


def oracle_features(scene, pose, cam: Camera, spec: FeatureOracleSpec, seed: int) -> FeatureMap:
    """Raycast each coarse cell center and emit its class embedding plus noise."""
    from . import simio  # local import; simio depends on renderer, not on features

    rng = np.random.default_rng(seed)
    h, w, k = spec.coarse_h, spec.coarse_w, spec.dim
    background_row = spec.class_embeddings.shape[0] - 1
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    us = (jj.ravel() + 0.5) * cam.width / w
    vs = (ii.ravel() + 0.5) * cam.height / h
    from .renderer import generate_rays

    origins, dirs = generate_rays(cam, pose, us, vs)
    depth, labels, _ = simio.raycast_batch(scene, origins, dirs)
    rows = np.where(depth > 0, labels, background_row)
    data = spec.class_embeddings[rows].astype(np.float32)
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape).astype(np.float32)
    if not np.isfinite(data).all():
        raise NumericError("oracle produced non-finite features")
    return FeatureMap(
        data=data.reshape(h, w, k),
        valid_mask=np.ones((h, w), dtype=bool),
        source_frame=0,
    )
