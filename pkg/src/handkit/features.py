"""Patch-feature grids and temporal change features.

A feature grid is an H x W lattice of C-dimensional float32 descriptors,
one per image patch (patch_size pixels square; a 384-pixel crop with
16-pixel patches gives the canonical 24 x 24 grid).  Change relative to a
reference grid is described by the per-patch delta (target - reference),
the cosine similarity map, and a fused tensor stacking
[delta, cosine, target, reference] channel-wise.

Grids round-trip through the FGRID v1 container: an ASCII header line
``FGRID 1 <H> <W> <C> <patch>`` followed by little-endian float32 samples
in row-major (row, column, channel) order.  The payload is written from
the in-memory array untouched, so save -> load is byte-exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FGRID_MAGIC = "FGRID"
FGRID_VERSION = 1

#: canonical patch edge, pixels
PATCH_SIZE = 16
#: canonical grid edge for a 384-pixel crop with 16-pixel patches
GRID_EDGE = 24


class FeatureFormatError(ValueError):
    """Raised for malformed FGRID files or inconsistent grids."""


@dataclass
class FeatureGrid:
    """A float32 descriptor lattice plus its patch geometry."""

    data: np.ndarray          # (H, W, C) float32
    patch_size: int = PATCH_SIZE
    source_tag: str = "target"

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise FeatureFormatError("feature grid data must be (H, W, C)")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FeatureFormatError("feature grid data must be finite")
        if self.patch_size <= 0:
            raise FeatureFormatError("patch size must be positive")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class SimilarityMap:
    """Per-patch cosine similarity in [-1, 1] (tiny float slack allowed)."""

    values: np.ndarray        # (H, W) float32
    patch_size: int = PATCH_SIZE

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise FeatureFormatError("similarity map must be 2D")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if arr.size and (arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6):
            raise FeatureFormatError("cosine similarities must lie in [-1, 1]")
        self.values = arr


def _check_compatible(reference: FeatureGrid, target: FeatureGrid) -> None:
    if reference.data.shape != target.data.shape:
        raise FeatureFormatError(
            f"grid shapes differ: {reference.data.shape} vs {target.data.shape}"
        )
    if reference.patch_size != target.patch_size:
        raise FeatureFormatError("grids use different patch sizes")


def delta_grid(reference: FeatureGrid, target: FeatureGrid) -> FeatureGrid:
    """Per-patch feature change, target minus reference."""
    _check_compatible(reference, target)
    return FeatureGrid(data=target.data - reference.data,
                       patch_size=reference.patch_size, source_tag="delta")


def cosine_map(reference: FeatureGrid, target: FeatureGrid) -> SimilarityMap:
    """Per-patch cosine similarity between reference and target descriptors.

    A patch where either descriptor is the zero vector gets similarity 0.
    """
    _check_compatible(reference, target)
    a = reference.data
    b = target.data
    dot = np.sum(a * b, axis=2)
    na = np.sqrt(np.sum(a * a, axis=2))
    nb = np.sqrt(np.sum(b * b, axis=2))
    denom = na * nb
    safe = denom > 0
    values = np.zeros(dot.shape, dtype=np.float32)
    values[safe] = dot[safe] / denom[safe]
    np.clip(values, -1.0, 1.0, out=values)
    return SimilarityMap(values=values, patch_size=reference.patch_size)


def fuse_change_tensor(reference: FeatureGrid, target: FeatureGrid) -> FeatureGrid:
    """Stack [delta, cosine, target, reference] channel-wise: (H, W, 3C + 1).

    The first C channels are the per-patch change (target minus reference),
    the next single channel the cosine map, then the target's C channels
    and finally the reference's.
    """
    _check_compatible(reference, target)
    delta = delta_grid(reference, target)
    cos = cosine_map(reference, target)
    fused = np.concatenate(
        [delta.data, cos.values[:, :, None], target.data, reference.data], axis=2
    )
    return FeatureGrid(data=fused, patch_size=reference.patch_size,
                       source_tag="fused")


def similarity_to_image(sim: SimilarityMap, patch_size: int | None = None) -> np.ndarray:
    """Render a similarity map as an 8-bit image.

    Similarity -1 maps to 0 and +1 to 255, and each patch becomes a
    patch_size-square block, so the image has the crop's pixel footprint.
    """
    ps = patch_size if patch_size is not None else sim.patch_size
    levels = np.clip((sim.values.astype(float) + 1.0) * 0.5 * 255.0, 0.0, 255.0)
    img = np.rint(levels).astype(np.uint8)
    return np.kron(img, np.ones((ps, ps), dtype=np.uint8))


def save_grid(grid: FeatureGrid, path) -> None:
    """Write an FGRID v1 file (see the module docstring for the layout)."""
    h, w, c = grid.data.shape
    header = f"{FGRID_MAGIC} {FGRID_VERSION} {h} {w} {c} {grid.patch_size}\n"
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def load_grid(path, source_tag: str = "target") -> FeatureGrid:
    """Read an FGRID v1 file; dimension or size mismatches raise."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FeatureFormatError(f"missing FGRID header line in {path}")
    try:
        fields = raw[:newline].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FeatureFormatError(f"non-ASCII FGRID header in {path}") from exc
    if len(fields) != 6 or fields[0] != FGRID_MAGIC:
        raise FeatureFormatError(f"not an FGRID file: {path}")
    if fields[1] != str(FGRID_VERSION):
        raise FeatureFormatError(f"unsupported FGRID version {fields[1]} in {path}")
    try:
        h, w, c, patch = (int(v) for v in fields[2:])
    except ValueError as exc:
        raise FeatureFormatError(f"malformed FGRID header in {path}") from exc
    if h <= 0 or w <= 0 or c <= 0 or patch <= 0:
        raise FeatureFormatError(f"invalid FGRID dimensions in {path}")
    payload = raw[newline + 1:]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise FeatureFormatError(
            f"FGRID payload of {len(payload)} bytes does not match header "
            f"({expected} expected) in {path}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return FeatureGrid(data=data.copy(), patch_size=patch, source_tag=source_tag)
