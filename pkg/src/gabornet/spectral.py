"""Singular-value spectra of circularly padded convolutions.

Under circular boundary conditions a single-channel convolution is
diagonalised by the 2-D DFT, so its singular values are the DFT magnitudes of
the zero-padded filter. For multi-channel filters the operator splits into one
small ``n_out x n_in`` complex matrix per frequency. ``circulant_oracle``
builds the dense operator explicitly and is only meant for cross-checks.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gabor import GaborFamily, Grid, rotate_coords, rotation_angles

log = logging.getLogger(__name__)

ORACLE_MAX_ROWS = 4096
DEDUP_TOL = 1e-9


@dataclass
class SpectrumReport:
    values: np.ndarray
    layer_id: str = ""
    lipschitz: float = field(init=False)
    q1: float = field(init=False)
    median: float = field(init=False)
    q3: float = field(init=False)

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=np.float64).ravel())[::-1]
        if v.size == 0:
            raise ValueError("spectrum has no values")
        self.values = v
        self.lipschitz = float(v[0])
        self.q1, self.median, self.q3 = (float(q) for q in np.percentile(v, [25, 50, 75]))


@dataclass
class LipschitzBoundReport:
    bound: float
    m_star: float
    n_star: float
    card_x_prime: int
    card_y_prime: int
    theta: float
    sigma: float
    gamma: float
    scaled_bounds: list[float] = field(default_factory=list)


def _as_array(filt) -> np.ndarray:
    return filt.data if isinstance(filt, T.Tensor) else np.asarray(filt, dtype=np.float64)


def _dft_matrix(n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.exp(-2j * math.pi * np.outer(idx, idx) / n)


def dft2(filt, H: int, W: int) -> np.ndarray:
    """Complex 2-D DFT of ``filt`` zero-padded to ``H x W`` (anchored at the origin)."""
    f = _as_array(filt)
    if f.ndim != 2:
        raise ValueError(f"expected a 2-D filter, got shape {f.shape}")
    kh, kw = f.shape
    if kh > H or kw > W:
        raise ValueError(f"{kh}x{kw} filter is larger than the {H}x{W} transform")
    # direct summation over the support only
    return _dft_matrix(H)[:, :kh] @ f @ _dft_matrix(W)[:kw, :]


def dft2_magnitudes(filt, H: int, W: int) -> np.ndarray:
    return np.abs(dft2(filt, H, W))


def single_channel_spectrum(filt, H: int, W: int, layer_id: str = "") -> SpectrumReport:
    f = _as_array(filt)
    if f.ndim == 4 and f.shape[:2] == (1, 1):
        f = f[0, 0]
    elif f.ndim == 3 and f.shape[0] == 1:
        f = f[0]
    return SpectrumReport(dft2_magnitudes(f, H, W), layer_id)


def jacobi_singular_values(A: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """Singular values of a stack of complex matrices by one-sided Jacobi.

    ``A`` has shape ``[batch, rows, cols]``. Columns are rotated pairwise until
    mutually orthogonal; the singular values are then the column norms. Returns
    ``[batch, min(rows, cols)]`` sorted descending.
    """
    A = np.array(A, dtype=np.complex128)
    if A.ndim == 2:
        A = A[None]
    if A.shape[2] > A.shape[1]:
        A = np.conj(np.swapaxes(A, 1, 2))
    A = A.copy()
    n = A.shape[2]
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai, aj = A[:, :, i].copy(), A[:, :, j].copy()
                alpha = np.einsum("bk,bk->b", ai.conj(), ai).real
                beta = np.einsum("bk,bk->b", aj.conj(), aj).real
                g = np.einsum("bk,bk->b", ai.conj(), aj)
                mag = np.abs(g)
                active = mag > tol * np.sqrt(alpha * beta)
                if not active.any():
                    continue
                rotated = True
                safe = np.where(active, mag, 1.0)
                phase = np.where(active, g / safe, 1.0)
                zeta = (beta - alpha) / (2.0 * safe)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                bj = aj * np.conj(phase)[:, None]
                A[:, :, i] = c * ai - s * bj
                A[:, :, j] = s * ai + c * bj
        if not rotated:
            break
    sv = np.linalg.norm(A, axis=1)
    return -np.sort(-sv, axis=1)


def multichannel_spectrum(filters, H: int, W: int, layer_id: str = "") -> SpectrumReport:
    """Union over all ``H*W`` frequencies of the per-frequency singular values."""
    f = _as_array(filters)
    if f.ndim != 4:
        raise ValueError(f"expected filters [n_out, n_in, k, k], got {f.shape}")
    n_out, n_in, kh, kw = f.shape
    if kh > H or kw > W:
        raise ValueError(f"{kh}x{kw} filter is larger than the {H}x{W} transform")
    FH, FW = _dft_matrix(H)[:, :kh], _dft_matrix(W)[:kw, :]
    coeff = np.einsum("uh,oihw,wv->uvoi", FH, f, FW).reshape(H * W, n_out, n_in)
    return SpectrumReport(jacobi_singular_values(coeff).ravel(), layer_id)


def circulant_oracle(filters, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense matrix of circular cross-correlation and its singular values.

    Column ``j`` is the layer applied to the ``j``-th standard basis input.
    """
    f = _as_array(filters)
    if f.ndim == 2:
        f = f[None, None]
    n_out, n_in = f.shape[:2]
    rows, cols = n_out * H * W, n_in * H * W
    if max(rows, cols) > ORACLE_MAX_ROWS:
        raise ValueError(f"oracle matrix {rows}x{cols} exceeds the {ORACLE_MAX_ROWS} limit")
    w = T.Tensor(f)
    M = np.empty((rows, cols))
    with T.no_grad():
        for j in range(cols):
            e = np.zeros(cols)
            e[j] = 1.0
            M[:, j] = T.conv2d(T.Tensor(e.reshape(1, n_in, H, W)), w, 1, "circular").data.ravel()
    return M, np.linalg.svd(M, compute_uv=False)


def _distinct(values: np.ndarray, tol: float = DEDUP_TOL) -> np.ndarray:
    v = np.sort(values.ravel())
    keep = np.concatenate(([True], np.diff(v) > tol))
    return v[keep]


def theorem1_bound(family: GaborFamily | dict, theta: float, grid: Grid) -> LipschitzBoundReport:
    """Closed-form Lipschitz bound of one rotated Gabor filter (unit scale).

    ``X`` and ``Y`` are the distinct rotated coordinates (set semantics);
    ``X'``/``Y'`` drop zero and ``m*``/``n*`` are their smallest magnitudes. A
    1x1 grid has empty ``X'`` and ``Y'``; the bound is then 1.
    """
    if isinstance(family, GaborFamily):
        sigma, gamma = family.sigma.item(), family.gamma.item()
        alpha = family.alpha.data
    else:
        sigma, gamma = float(family["sigma"]), float(family["gamma"])
        alpha = np.atleast_1d(family.get("alpha", [1.0]))
    xr, yr = rotate_coords(grid, theta)

    def factor(coords, scale):
        distinct = _distinct(coords)
        nonzero = distinct[np.abs(distinct) > DEDUP_TOL]
        if nonzero.size == 0:
            return 1.0, math.inf, 0
        nearest = float(np.min(np.abs(nonzero)))
        return 1.0 + nonzero.size * math.exp(-(sigma * scale * nearest) ** 2), nearest, nonzero.size

    fx, m_star, cx = factor(xr, 1.0)
    fy, n_star, cy = factor(yr, gamma)
    bound = fx * fy
    return LipschitzBoundReport(
        bound=bound, m_star=m_star, n_star=n_star, card_x_prime=cx, card_y_prime=cy,
        theta=float(theta), sigma=sigma, gamma=gamma,
        scaled_bounds=[abs(float(a)) * bound for a in alpha],
    )


def family_bound(family: GaborFamily, grid: Grid) -> float:
    """Largest closed-form bound over the family's rotations."""
    return max(theorem1_bound(family, th, grid).bound for th in rotation_angles(family.r))


def is_axis_aligned(theta: float, tol: float = 1e-12) -> bool:
    q = theta / (math.pi / 2)
    return abs(q - round(q)) < tol


def gabor_bound_vs_exact(families: list[GaborFamily], grid: Grid, H: int, W: int) -> list[dict]:
    """Per-filter closed-form bound next to the exact DFT Lipschitz constant.

    Off-axis rotations are reported and logged but carry no guarantee.
    """
    from .gabor import eval_filter

    rows = []
    with T.no_grad():
        for fi, fam in enumerate(families):
            unit = GaborFamily(fam.sigma, fam.gamma, fam.lambda_, fam.psi,
                               T.Tensor(np.ones(fam.r)))
            for j, theta in enumerate(rotation_angles(fam.r)):
                rep = theorem1_bound(fam, theta, grid)
                exact = single_channel_spectrum(eval_filter(unit, j, grid).data, H, W).lipschitz
                aligned = is_axis_aligned(theta)
                if not aligned and exact > rep.bound:
                    log.info("off-axis theta=%.4f: exact %.6f exceeds closed form %.6f",
                             theta, exact, rep.bound)
                rows.append({
                    "family": fi, "rotation": j, "theta": float(theta),
                    "sigma": rep.sigma, "gamma": rep.gamma, "bound": rep.bound,
                    "scaled_bound": rep.scaled_bounds[j], "exact": exact,
                    "axis_aligned": aligned,
                })
    return rows


def gabor_layer_spectrum(bank, H: int, W: int, layer_id: str = "") -> SpectrumReport:
    """Union of the single-channel spectra of every (alpha-scaled) bank filter."""
    b = _as_array(bank)
    vals = [dft2_magnitudes(b[i, 0], H, W).ravel() for i in range(b.shape[0])]
    return SpectrumReport(np.concatenate(vals), layer_id)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def spectrum_summary_csv(reports: list[SpectrumReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "q1", "median", "q3", "max", "count"])
    for r in reports:
        w.writerow([r.layer_id, _fmt(r.q1), _fmt(r.median), _fmt(r.q3),
                    _fmt(r.lipschitz), r.values.size])
    return buf.getvalue()
