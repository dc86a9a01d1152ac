"""Hyperspectral cubes: file formats, window extraction, batching, synthetic scenes."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import CubeFormatError, UsageError

CUBE_MAGIC = b"HSICUBE1"
_HEADER = struct.Struct("<8sIII")
PADDING_MODES = ("reflect", "edge", "zero")


@dataclass
class HsiCube:
    """H x W x L reflectance cube stored as float64."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise UsageError(f"cube must be H x W x L, got shape {self.values.shape}")
        h, w, l = self.values.shape
        if h * w < 1 or l < 1:
            raise UsageError(f"cube has an empty dimension: {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise CubeFormatError("cube holds non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixels(self) -> np.ndarray:
        """N x L matrix of spectra in row-major pixel order."""
        return self.values.reshape(-1, self.bands)


@dataclass
class GroundTruth:
    endmembers: np.ndarray  # L x P
    abundances: np.ndarray  # H x W x P


# -- file formats -------------------------------------------------------------

def save_cube(path, cube: HsiCube | np.ndarray) -> None:
    """Write the binary cube format: magic, H, W, L (u32 LE), then f64 LE BIP."""
    values = cube.values if isinstance(cube, HsiCube) else np.asarray(cube, dtype=np.float64)
    h, w, l = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CUBE_MAGIC, h, w, l))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def _read_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CubeFormatError(f"{path}: file shorter than the cube header")
    magic, h, w, l = _HEADER.unpack_from(raw)
    if magic != CUBE_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {magic!r}")
    if h == 0 or w == 0 or l == 0:
        raise CubeFormatError(f"{path}: header dimensions must be positive, got {h}x{w}x{l}")
    expected = h * w * l * 8
    payload = len(raw) - _HEADER.size
    if payload < expected:
        raise CubeFormatError(f"{path}: truncated payload, {payload} of {expected} bytes")
    if payload > expected:
        raise CubeFormatError(f"{path}: {payload - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return data.reshape(h, w, l)


def _read_text(path, shape) -> np.ndarray:
    try:
        mat = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise CubeFormatError(f"{path}: {exc}") from exc
    n, l = mat.shape
    h, w = shape if shape is not None else (n, 1)
    if h * w != n:
        raise CubeFormatError(f"{path}: {n} pixel rows cannot fill a {h}x{w} image")
    return mat.reshape(h, w, l)


def load_cube(path, fmt: str | None = None, shape: tuple[int, int] | None = None) -> HsiCube:
    """Load a cube from the binary format or a pixels x bands text matrix.

    ``fmt`` is ``"binary"`` or ``"text"``; when omitted it is sniffed from the
    magic bytes. ``shape`` gives (H, W) for text input (default N x 1).
    """
    path = Path(path)
    if not path.exists():
        raise CubeFormatError(f"{path}: no such file")
    if fmt is None:
        with open(path, "rb") as fh:
            fmt = "binary" if fh.read(len(CUBE_MAGIC)) == CUBE_MAGIC else "text"
    if fmt == "binary":
        values = _read_binary(path)
    elif fmt == "text":
        values = _read_text(path, shape)
    else:
        raise UsageError(f"unknown cube format {fmt!r}")
    if not np.all(np.isfinite(values)):
        raise CubeFormatError(f"{path}: non-finite values in payload")
    return HsiCube(values)


def save_matrix(path, mat: np.ndarray) -> None:
    """Whitespace-separated text matrix with round-trip precision."""
    np.savetxt(path, np.atleast_2d(mat), fmt="%.17g")


def load_matrix(path) -> np.ndarray:
    try:
        mat = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise CubeFormatError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(mat)):
        raise CubeFormatError(f"{path}: non-finite values")
    return mat


def save_ground_truth(endmember_path, abundance_path, gt: GroundTruth) -> None:
    save_matrix(endmember_path, gt.endmembers)
    save_cube(abundance_path, gt.abundances)


def load_ground_truth(endmember_path, abundance_path=None) -> GroundTruth:
    endmembers = load_matrix(endmember_path)
    abundances = load_cube(abundance_path).values if abundance_path is not None else None
    return GroundTruth(endmembers, abundances)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; values are clipped to [0, 1] and mapped linearly to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise UsageError(f"PGM needs a 2-D image, got shape {img.shape}")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise CubeFormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


# -- windows ------------------------------------------------------------------

def check_window_size(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise UsageError(f"window size must be a positive odd integer, got {k}")


def resolve_index(idx: np.ndarray, n: int, padding: str) -> np.ndarray:
    """Map possibly out-of-range coordinates into [0, n) under a padding policy.

    For ``zero`` padding out-of-range entries come back as -1.
    """
    idx = np.asarray(idx)
    if padding == "reflect":
        if n == 1:
            return np.zeros_like(idx)
        period = 2 * (n - 1)
        r = np.mod(idx, period)
        return np.where(r > n - 1, period - r, r)
    if padding == "edge":
        return np.clip(idx, 0, n - 1)
    if padding == "zero":
        return np.where((idx < 0) | (idx >= n), -1, idx)
    raise UsageError(f"unknown padding {padding!r}; expected one of {PADDING_MODES}")


class WindowExtractor:
    """Gathers K x K neighbourhoods from a padded copy of the cube.

    Window rows are ordered ``p * K + q``; the centre is row ``(K*K - 1) // 2``.
    """

    def __init__(self, cube: HsiCube, k: int, padding: str = "reflect"):
        check_window_size(k)
        self.k = k
        self.r = k // 2
        self.cube = cube
        h, w, l = cube.values.shape
        rows = resolve_index(np.arange(-self.r, h + self.r), h, padding)
        cols = resolve_index(np.arange(-self.r, w + self.r), w, padding)
        if padding == "zero":
            padded = np.zeros((h + 2 * self.r, w + 2 * self.r, l))
            padded[self.r:self.r + h, self.r:self.r + w] = cube.values
        else:
            padded = cube.values[rows][:, cols]
        self.padded = padded
        off = np.arange(k)
        self._dp = np.repeat(off, k)
        self._dq = np.tile(off, k)

    @property
    def center_row(self) -> int:
        return (self.k * self.k - 1) // 2

    def windows(self, flat_index) -> np.ndarray:
        """B x K^2 x L windows for pixels given by row-major flat index."""
        flat_index = np.asarray(flat_index, dtype=np.intp)
        i, j = np.divmod(flat_index, self.cube.width)
        return self.padded[i[:, None] + self._dp, j[:, None] + self._dq]


@dataclass
class Window:
    center: tuple[int, int]
    size: int
    pixels: np.ndarray  # K^2 x L


def extract_window(cube: HsiCube, i: int, j: int, k: int, padding: str = "reflect") -> Window:
    if not (0 <= i < cube.height and 0 <= j < cube.width):
        raise UsageError(f"pixel ({i}, {j}) outside a {cube.height}x{cube.width} cube")
    ext = WindowExtractor(cube, k, padding)
    return Window((i, j), k, ext.windows([i * cube.width + j])[0])


@dataclass
class BatchPlan:
    seed: int
    batch_size: int = 128

    def order(self, n_pixels: int, epoch: int = 0) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(n_pixels)


@dataclass
class Batch:
    index: np.ndarray  # flat pixel indices
    windows: np.ndarray  # B x K^2 x L


def make_batches(cube: HsiCube, plan: BatchPlan, k: int, padding: str = "reflect",
                 epoch: int = 0, extractor: WindowExtractor | None = None) -> Iterator[Batch]:
    if plan.batch_size < 1:
        raise UsageError(f"batch size must be positive, got {plan.batch_size}")
    ext = extractor or WindowExtractor(cube, k, padding)
    order = plan.order(cube.n_pixels, epoch)
    for start in range(0, len(order), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield Batch(idx, ext.windows(idx))


def n_batches(n_pixels: int, batch_size: int) -> int:
    return math.ceil(n_pixels / batch_size)


# -- synthetic scenes ---------------------------------------------------------

def smooth_spectra(p: int, l: int, rng: np.random.Generator, min_angle: float = 0.15) -> np.ndarray:
    """L x P matrix of smooth positive spectra with pairwise angles >= ``min_angle``."""
    grid = np.linspace(0.0, 1.0, l)
    cols: list[np.ndarray] = []
    while len(cols) < p:
        n_bumps = rng.integers(3, 7)
        centres = rng.uniform(-0.1, 1.1, n_bumps)
        widths = rng.uniform(0.05, 0.25, n_bumps)
        heights = rng.uniform(-1.0, 1.0, n_bumps)
        curve = rng.uniform(0.2, 0.6) + rng.uniform(-0.3, 0.3) * grid
        curve = curve + (heights * np.exp(-0.5 * ((grid[:, None] - centres) / widths) ** 2)).sum(axis=1)
        lo, hi = curve.min(), curve.max()
        top = rng.uniform(0.5, 0.95)
        curve = 0.03 + (curve - lo) / (hi - lo) * (top - 0.03)
        unit = curve / np.linalg.norm(curve)
        if all(np.arccos(np.clip(unit @ (c / np.linalg.norm(c)), -1, 1)) >= min_angle for c in cols):
            cols.append(curve)
    return np.stack(cols, axis=1)


def synthetic_abundances(p: int, h: int, w: int, rng: np.random.Generator,
                         block: int = 4, max_purity: float = 0.8) -> np.ndarray:
    """H x W x P abundance maps on the simplex with spatial correlation.

    Dirichlet(1) draws on a grid of ``block`` x ``block`` tiles, a 3 x 3 mean
    filter to blend tile borders, then any pixel whose largest fraction
    exceeds ``max_purity`` is pulled toward the uniform mixture until it
    equals ``max_purity``.
    """
    gh, gw = -(-h // block), -(-w // block)
    coarse = rng.dirichlet(np.ones(p), size=(gh, gw))
    ab = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)[:h, :w]
    ab = uniform_filter(ab, size=(3, 3, 1), mode="mirror")
    ab /= ab.sum(axis=-1, keepdims=True)
    peak = ab.max(axis=-1, keepdims=True)
    over = peak > max_purity
    t = np.where(over, (max_purity - 1.0 / p) / np.where(over, peak - 1.0 / p, 1.0), 1.0)
    ab = t * ab + (1.0 - t) / p
    return ab / ab.sum(axis=-1, keepdims=True)


def measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = noisy - clean
    return float(10.0 * np.log10(np.mean(clean**2) / np.mean(noise**2)))


def generate_synthetic(p: int, l: int, h: int, w: int, snr_db: float = 30.0, seed: int = 0,
                       block: int = 4) -> tuple[HsiCube, GroundTruth]:
    """Linear-mixture scene with white Gaussian noise at ``snr_db``.

    The realized noise is rescaled so the empirical SNR equals ``snr_db``;
    ``snr_db=inf`` disables noise.
    """
    if p < 2 or l <= p or h < 1 or w < 1:
        raise UsageError(f"invalid synthetic dimensions P={p}, L={l}, H={h}, W={w}")
    rng = np.random.default_rng(seed)
    endmembers = smooth_spectra(p, l, rng)
    abundances = synthetic_abundances(p, h, w, rng, block=block)
    clean = abundances @ endmembers.T
    if math.isinf(snr_db) and snr_db > 0:
        return HsiCube(clean), GroundTruth(endmembers, abundances)
    noise = rng.standard_normal(clean.shape)
    target = np.mean(clean**2) / 10.0 ** (snr_db / 10.0)
    noise *= np.sqrt(target / np.mean(noise**2))
    return HsiCube(clean + noise), GroundTruth(endmembers, abundances)
