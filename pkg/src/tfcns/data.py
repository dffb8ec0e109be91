"""Bit-exact tensor file container, PPM image output, the synthetic shape
dataset used for desk-scale training, and dataset directory loading.

TNSR container layout (all integers little-endian):

    magic   4 bytes  b"TNSR"
    version u16      currently 1
    dtype   u8       0=float32  1=float64  2=uint8  3=int32
    rank    u8
    dims    u32 * rank
    payload raw element bytes, row-major, little-endian
    crc     u32      CRC32 of the payload bytes

Dataset directory convention: one ``<case_id>.img.tnsr`` (C x H x W float
image in [0,1]) plus one ``<case_id>.msk.tnsr`` (H x W integer mask) per
case. Unpaired files are an error.

Mask images are written as binary PPM (P6) using the fixed palette
``MASK_PALETTE`` (class index modulo palette size). Heatmaps map [0,1]
through the 256-entry blue->cyan->yellow->red colormap ``HEAT_COLORMAP``;
see ``_colormap_entry`` for the exact integer formula.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigInvalid, DatasetError, FormatError, VersionError

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1

# tag -> (numpy dtype, little-endian struct dtype)
DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i4"),
}
_TAG_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("u", 1): 2, ("i", 4): 3}


def _tag_for(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _TAG_FOR_KIND:
        raise FormatError(f"dtype {arr.dtype} has no TNSR tag (f32/f64/u8/i32 only)")
    return _TAG_FOR_KIND[key]


def write_tensor(path, array: np.ndarray) -> None:
    """Write an array to the TNSR container; exact round trip guaranteed."""
    arr = np.asarray(array)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    tag = _tag_for(arr)
    payload = arr.astype(DTYPE_TAGS[tag], copy=False).tobytes()
    head = TNSR_MAGIC + struct.pack("<HBB", TNSR_VERSION, tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    with open(path, "wb") as f:
        f.write(head)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def read_tensor(path) -> np.ndarray:
    """Read a TNSR container; raises FormatError on corruption or truncation
    and VersionError on an unsupported version."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != TNSR_MAGIC:
        raise FormatError(f"{path}: not a TNSR file")
    version, tag, rank = struct.unpack_from("<HBB", blob, 4)
    if version != TNSR_VERSION:
        raise VersionError(version, TNSR_VERSION)
    if tag not in DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    offset = 8
    if len(blob) < offset + 4 * rank:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
    offset += 4 * rank
    dtype = DTYPE_TAGS[tag]
    n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    if len(blob) != offset + n_bytes + 4:
        raise FormatError(f"{path}: payload length mismatch")
    payload = blob[offset:offset + n_bytes]
    (crc,) = struct.unpack_from("<I", blob, offset + n_bytes)
    if crc != zlib.crc32(payload):
        raise FormatError(f"{path}: CRC mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


# ---------------------------------------------------------------------------
# image output
# ---------------------------------------------------------------------------

MASK_PALETTE = (
    (0, 0, 0),        # 0 background
    (230, 25, 75),    # 1 red
    (60, 180, 75),    # 2 green
    (255, 225, 25),   # 3 yellow
    (0, 130, 200),    # 4 blue
    (245, 130, 48),   # 5 orange
    (145, 30, 180),   # 6 purple
    (70, 240, 240),   # 7 cyan
    (240, 50, 230),   # 8 magenta
    (128, 128, 128),  # 9 gray
)


def _colormap_entry(i: int) -> tuple[int, int, int]:
    if i < 85:
        return (0, i * 3, 255)
    if i < 170:
        return ((i - 85) * 3, 255, 255 - (i - 85) * 3)
    return (255, 255 - min((i - 170) * 3, 255), 0)


HEAT_COLORMAP = tuple(_colormap_entry(i) for i in range(256))


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6), 8 bits per channel."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM writer needs H x W x 3, got {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def write_mask_image(path, mask: np.ndarray, palette: Optional[Sequence] = None) -> None:
    """Class-index mask -> colored PPM via the (documented) fixed palette."""
    palette = np.asarray(palette if palette is not None else MASK_PALETTE, dtype=np.uint8)
    mask = np.asarray(mask, dtype=np.int64) % len(palette)
    write_ppm(path, palette[mask])


def _heat_to_rgb(heatmap: np.ndarray) -> np.ndarray:
    table = np.asarray(HEAT_COLORMAP, dtype=np.uint8)
    idx = np.clip(np.rint(np.asarray(heatmap, dtype=np.float64) * 255), 0, 255).astype(np.int64)
    return table[idx]


def write_heatmap(path, heatmap: np.ndarray) -> None:
    """[0,1] heat values through the blue->red colormap."""
    write_ppm(path, _heat_to_rgb(heatmap))


def write_cam_overlay(path, heatmap: np.ndarray, threshold: float = 0.4,
                      image: Optional[np.ndarray] = None) -> None:
    """Activation overlay: pixels with heat strictly above the threshold show
    the colormapped heat; pixels at or below it show the grayscale base image,
    or black when no image is given."""
    heat = np.asarray(heatmap, dtype=np.float64)
    active = heat > threshold
    if image is None:
        base = np.zeros(heat.shape + (3,), dtype=np.uint8)
    else:
        img = np.asarray(image, dtype=np.float64)
        gray = img.mean(axis=0) if img.ndim == 3 else img
        base = np.repeat(
            np.clip(np.rint(gray * 255), 0, 255).astype(np.uint8)[..., None], 3, axis=2
        )
    rgb = np.where(active[..., None], _heat_to_rgb(heat), base)
    write_ppm(path, rgb)


# ---------------------------------------------------------------------------
# dataset types, synthetic generator, directory IO
# ---------------------------------------------------------------------------

@dataclass
class SegmentationPair:
    """One dataset case: C x H x W image in [0,1] plus an H x W integer mask."""

    image: np.ndarray
    mask: np.ndarray
    case_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2 or self.image.shape[1:] != self.mask.shape:
            raise DatasetError(
                f"{self.case_id}: image {self.image.shape} / mask {self.mask.shape} do not align"
            )


@dataclass
class SyntheticSpec:
    """Recipe for the synthetic shape dataset: per case, one instance of each
    foreground class's shape family (disk / rectangle / ring, assigned
    round-robin) placed in disjoint grid cells, with class-dependent image
    intensity plus Gaussian noise."""

    n_cases: int = 8
    height: int = 32
    width: int = 32
    num_classes: int = 4
    noise_sigma: float = 0.02
    seed: int = 0
    radius_min: int = 3
    radius_max: int = 5


_FAMILIES = ("disk", "rect", "ring")


def _rasterize(family: str, cy: int, cx: int, r: int, rng: np.random.Generator,
               yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    if family == "disk":
        return d2 <= r * r
    if family == "rect":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    inner = max(1, r // 2)
    return (d2 <= r * r) & (d2 > inner * inner)


def class_intensity(cls: int, num_classes: int) -> float:
    """Mean image intensity of a class region: evenly spaced in (0,1)."""
    return (cls + 0.5) / num_classes


def generate_synthetic(spec: SyntheticSpec) -> list[SegmentationPair]:
    """Deterministic synthetic dataset; every class occurs in every case."""
    n_fg = spec.num_classes - 1
    if n_fg < 1:
        raise ConfigInvalid("synthetic dataset needs at least one foreground class")
    grid = int(np.ceil(np.sqrt(n_fg)))
    cell_h, cell_w = spec.height // grid, spec.width // grid
    if spec.radius_max * 2 + 1 > min(cell_h, cell_w):
        raise ConfigInvalid(
            f"radius_max {spec.radius_max} does not fit {cell_h}x{cell_w} placement cells"
        )
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    pairs = []
    for i in range(spec.n_cases):
        mask = np.zeros((spec.height, spec.width), dtype=np.int32)
        for c in range(1, spec.num_classes):
            cell = c - 1
            oy, ox = (cell // grid) * cell_h, (cell % grid) * cell_w
            r = int(rng.integers(spec.radius_min, spec.radius_max + 1))
            cy = oy + r + int(rng.integers(0, cell_h - 2 * r))
            cx = ox + r + int(rng.integers(0, cell_w - 2 * r))
            family = _FAMILIES[(c - 1) % len(_FAMILIES)]
            mask[_rasterize(family, cy, cx, r, rng, yy, xx)] = c
        levels = np.array([class_intensity(c, spec.num_classes) for c in range(spec.num_classes)])
        image = levels[mask]
        if spec.noise_sigma > 0:
            image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)[None, :, :]
        pairs.append(SegmentationPair(image=image, mask=mask, case_id=f"case{i:03d}"))
    return pairs


def save_dataset(directory, pairs: Sequence[SegmentationPair]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        write_tensor(directory / f"{pair.case_id}.img.tnsr", pair.image.astype(np.float32))
        write_tensor(directory / f"{pair.case_id}.msk.tnsr", pair.mask.astype(np.int32))


def load_dataset(directory) -> list[SegmentationPair]:
    """Pairs ``<id>.img.tnsr`` with ``<id>.msk.tnsr``; any orphan file is an
    error naming the offender. Cases come back sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    images = {p.name[:-len(".img.tnsr")]: p for p in directory.glob("*.img.tnsr")}
    masks = {p.name[:-len(".msk.tnsr")]: p for p in directory.glob("*.msk.tnsr")}
    for stem, path in sorted(images.items()):
        if stem not in masks:
            raise DatasetError(f"orphan image file without mask: {path.name}")
    for stem, path in sorted(masks.items()):
        if stem not in images:
            raise DatasetError(f"orphan mask file without image: {path.name}")
    pairs = []
    for stem in sorted(images):
        image = read_tensor(images[stem]).astype(np.float32)
        if image.ndim == 2:
            image = image[None, :, :]
        mask = read_tensor(masks[stem]).astype(np.int32)
        pairs.append(SegmentationPair(image=image, mask=mask, case_id=stem))
    return pairs


def split(pairs: Sequence[SegmentationPair], train_fraction: float,
          seed: int) -> tuple[list[SegmentationPair], list[SegmentationPair]]:
    """Seeded shuffle, then a contiguous cut at round(train_fraction * n)."""
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(round(train_fraction * len(pairs)))
    return [pairs[i] for i in order[:n_train]], [pairs[i] for i in order[n_train:]]


def convert_ct_volume(src, dst_dir, *, window=None, slice_axis=0, normalize="window"):
    """Converter stub for external CT datasets.

    Users holding the original scan archives should export each 2-D slice as
    ``<case>_<slice>.img.tnsr`` (float32, 1 x H x W, intensities mapped to
    [0,1]) and ``<case>_<slice>.msk.tnsr`` (int32, H x W, organ labels from 0).
    Windowing bounds (HU), the slice axis, and the normalization mode are
    deliberately parameters: the upstream preprocessing is dataset metadata
    this package does not ship.
    """
    raise NotImplementedError(
        "DICOM/NIfTI ingestion is out of scope; export TNSR pairs as described "
        "in convert_ct_volume's docstring"
    )
