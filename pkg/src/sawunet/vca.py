"""Vertex component analysis (Nascimento & Bioucas-Dias, 2005)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import HsiCube
from .errors import DegenerateDataError, UsageError


@dataclass
class VcaResult:
    endmembers: np.ndarray  # L x P, exact copies of the selected pixels
    indices: np.ndarray  # P flat pixel indices


def estimate_snr(y: np.ndarray, mean: np.ndarray, x_proj: np.ndarray) -> float:
    """SNR estimate (dB) from total power and power in the P-dim signal subspace."""
    l, n = y.shape
    p = x_proj.shape[0]
    p_y = np.sum(y**2) / n
    p_x = np.sum(x_proj**2) / n + np.sum(mean**2)
    num, den = p_x - p / l * p_y, p_y - p_x
    if den <= 0 or num <= 0:
        return np.inf if den <= 0 else -np.inf
    return float(10.0 * np.log10(num / den))


def _top_directions(centered: np.ndarray, d: int) -> np.ndarray:
    n = centered.shape[1]
    u, _, _ = np.linalg.svd(centered @ centered.T / n)
    return u[:, :d]


def vca(cube: HsiCube | np.ndarray, p: int, seed: int = 0, snr_input: float | None = None) -> VcaResult:
    """Pick ``p`` pixels that approximate the vertices of the data simplex.

    ``cube`` may be an HsiCube or an N x L pixel matrix. Selected pixels are
    always distinct; if the argmax lands on a pixel already taken, the next
    largest projection is used.
    """
    pixels = cube.pixels() if isinstance(cube, HsiCube) else np.asarray(cube, dtype=np.float64)
    y = pixels.T
    l, n = y.shape
    if not 1 <= p < l:
        raise UsageError(f"need 1 <= P < L, got P={p}, L={l}")
    if n < p:
        raise UsageError(f"need at least P={p} pixels, got {n}")
    rng = np.random.default_rng(seed)

    mean = y.mean(axis=1, keepdims=True)
    centered = y - mean
    if np.max(np.abs(centered)) <= 1e-12 * max(1.0, np.max(np.abs(y))):
        raise DegenerateDataError("all pixels are identical; no simplex to find")

    if p == 1:
        # single direction: largest projection onto the leading principal axis
        u = _top_directions(y, 1)
        idx = np.array([int(np.argmax(np.abs(u.T @ y)))])
        return VcaResult(pixels[idx].T.copy(), idx)

    ud = _top_directions(centered, p)
    if snr_input is None:
        snr = estimate_snr(y, mean, ud.T @ centered)
    else:
        snr = snr_input
    # threshold from the reference algorithm: 15 + 10 log10(P) dB
    snr_threshold = 15.0 + 10.0 * np.log10(p)

    if snr < snr_threshold:
        # low SNR: project onto the (P-1)-dim affine subspace and lift with a constant row
        x = ud[:, :p - 1].T @ centered
        c = np.sqrt(np.max(np.sum(x**2, axis=0)))
        proj = np.vstack([x, c * np.ones((1, n))])
    else:
        # high SNR: projective projection onto the P-dim subspace through the origin
        ud = _top_directions(y, p)
        x = ud.T @ y
        u = x.mean(axis=1, keepdims=True)
        scale = np.sum(x * u, axis=0)
        scale = np.where(np.abs(scale) < 1e-300, 1e-300, scale)
        proj = x / scale

    indices = np.zeros(p, dtype=np.intp)
    basis = np.zeros((p, p))
    basis[-1, 0] = 1.0
    taken = np.zeros(n, dtype=bool)
    for i in range(p):
        w = rng.random((p, 1))
        f = w - basis @ (np.linalg.pinv(basis) @ w)
        f /= np.linalg.norm(f)
        score = np.abs(f.T @ proj).ravel()
        score[taken] = -1.0
        k = int(np.argmax(score))
        indices[i] = k
        taken[k] = True
        basis[:, i] = proj[:, k]
    return VcaResult(pixels[indices].T.copy(), indices)
