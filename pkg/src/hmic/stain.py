"""Color balancing and two-stain normalization.

Color balance is a global per-pixel transform::

    out = clip(max(alpha * A @ diag(gains) @ rgb, 0) ** gamma, 0, 1)

Stain normalization works in optical density (OD), ``V = -ln(I + 1e-6)``.
Tissue OD is factorized as ``V ~ W @ H``.  ``W`` is a 3x2 nonnegative matrix
with unit-norm columns, one per stain.  ``H`` holds the nonnegative
concentrations and carries an L1 penalty.  A source image is moved to a target
appearance by keeping its concentrations, rescaling them per stain by the
ratio of robust maxima, and recombining them with the target's ``W``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ArgumentError, ConvergenceError, DegenerateProfileError, DimensionError,
                     FormatError, InsufficientTissueError)

log = logging.getLogger(__name__)

OD_EPS = 1e-6
TISSUE_OD = 0.15
DEFAULT_LAMBDA = 0.1
MAX_ITER = 500
TOL = 1e-5
MAX_PIXELS = 20000
MIN_TISSUE_PIXELS = 16


# ---------------------------------------------------------------------------
# Color balance
# ---------------------------------------------------------------------------

@dataclass
class ColorBalanceParams:
    alpha: float = 1.0
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    gains: np.ndarray = field(default_factory=lambda: np.ones(3))
    gamma: float = 1.0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if self.matrix.shape != (3, 3) or not np.all(np.isfinite(self.matrix)):
            raise ArgumentError("color matrix must be a finite 3x3 array")
        if self.gains.shape != (3,) or not np.all(self.gains > 0):
            raise ArgumentError("channel gains must be three positive numbers")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ArgumentError(f"alpha must be positive, got {self.alpha}")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ArgumentError(f"gamma must be positive, got {self.gamma}")

    def linear(self) -> np.ndarray:
        return self.alpha * self.matrix * self.gains[None, :]


def color_balance(image, params: ColorBalanceParams):
    """Apply ``params`` pixelwise.  Works on ``(..., 3)`` arrays and keeps the dtype."""
    img = np.asarray(image)
    if img.shape[-1] != 3:
        raise DimensionError(f"expected RGB channels last, got shape {img.shape}")
    x = img.astype(np.float64)
    lin = x @ params.linear().T
    np.maximum(lin, 0.0, out=lin)
    if params.gamma != 1.0:
        lin **= params.gamma
    np.minimum(lin, 1.0, out=lin)
    return lin.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)


def gray_world_gains(image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    means = x.mean(axis=0)
    if np.any(means <= 0):
        raise ArgumentError("gray-world balance needs every channel mean above zero")
    return means.mean() / means


def cb_percent_to_params(p, image=None) -> ColorBalanceParams:
    """Blend between identity (``p=0``) and full gray-world white balance (``p=100``).

    ``gains_c = (1 - w) + w * mean_luma / mean_c`` with ``w = p / 100`` and
    ``mean_luma = (R + G + B) / 3`` over ``image``.
    """
    if not 0 <= p <= 100:
        raise ArgumentError(f"color balance percentage must lie in [0, 100], got {p}")
    if p == 0:
        return ColorBalanceParams()
    if image is None:
        raise ArgumentError("a nonzero percentage needs the image to derive gray-world gains")
    w = p / 100.0
    return ColorBalanceParams(gains=(1 - w) + w * gray_world_gains(image))


# ---------------------------------------------------------------------------
# Stain profile
# ---------------------------------------------------------------------------

@dataclass
class StainProfile:
    stain_matrix: np.ndarray  # (3, 2), columns hematoxylin-like then eosin-like
    concentration_p99: np.ndarray  # (2,)

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64)
        self.concentration_p99 = np.asarray(self.concentration_p99, dtype=np.float64)
        if self.stain_matrix.shape != (3, 2) or self.concentration_p99.shape != (2,):
            raise DimensionError("stain profile needs a 3x2 matrix and two percentiles")

    def to_dict(self):
        return {"stain_matrix": self.stain_matrix.tolist(),
                "concentration_p99": self.concentration_p99.tolist()}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["stain_matrix"], d["concentration_p99"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid stain profile: {exc}") from None


def save_profile(profile: StainProfile, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(profile.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def load_profile(path) -> StainProfile:
    try:
        return StainProfile.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def optical_density(image) -> np.ndarray:
    """``-ln(I + eps)`` clipped at zero, as ``(..., 3)`` float64."""
    x = np.asarray(image, dtype=np.float64)
    return np.maximum(-np.log(x + OD_EPS), 0.0)


def od_to_rgb(od) -> np.ndarray:
    return np.clip(np.exp(-np.asarray(od)) - OD_EPS, 0.0, 1.0)


def tissue_od(image, threshold=TISSUE_OD) -> np.ndarray:
    """Tissue pixels as a ``(3, M)`` OD matrix."""
    od = optical_density(image).reshape(-1, 3)
    return od[np.linalg.norm(od, axis=1) >= threshold].T


def solve_concentrations(W, V, lam=0.0):
    """Exact ``argmin_{h >= 0} 0.5 * |v - W h|^2 + lam * sum(h)`` for every column of ``V``.

    With two stains each column is a two-variable QP.  Its minimizer is the
    best feasible point among the unconstrained solution, the two single-stain
    solutions and zero.
    """
    W = np.asarray(W, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    G = W.T @ W
    b = W.T @ V - lam  # (2, M)
    m = V.shape[1]
    cands = [np.zeros((2, m))]
    for j in (0, 1):
        c = np.zeros((2, m))
        if G[j, j] > 0:
            c[j] = np.maximum(b[j] / G[j, j], 0.0)
        cands.append(c)
    det = G[0, 0] * G[1, 1] - G[0, 1] ** 2
    if det > 1e-12 * max(G[0, 0] * G[1, 1], 1e-300):
        both = np.linalg.solve(G, b)
        cands.append(np.where(np.all(both >= 0, axis=0), both, 0.0))
    best, best_val = None, None
    for c in cands:
        val = 0.5 * np.einsum("im,ij,jm->m", c, G, c) - np.einsum("im,im->m", b, c)
        if best is None:
            best, best_val = c, val
        else:
            take = val < best_val
            best = np.where(take, c, best)
            best_val = np.where(take, val, best_val)
    return best


def snmf_objective(V, W, H, lam) -> float:
    r = V - W @ H
    return float(0.5 * np.sum(r * r) + lam * np.sum(H))


def _normalize_columns(W, H):
    n = np.linalg.norm(W, axis=0)
    n = np.where(n > 0, n, 1.0)
    return W / n, H * n[:, None]


def angular_init(V, rng) -> np.ndarray:
    """Two OD directions at the 1st and 99th angle percentiles in the top-2 eigenplane."""
    idx = rng.permutation(V.shape[1])[:min(V.shape[1], 5000)]
    sample = V[:, idx]
    _, vecs = np.linalg.eigh(sample @ sample.T)
    plane = vecs[:, [2, 1]]
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1
    if plane[:, 1].sum() < 0:
        plane[:, 1] *= -1
    proj = plane.T @ sample
    phi = np.arctan2(proj[1], proj[0])
    lo, hi = np.percentile(phi, [1, 99])
    W = np.stack([plane @ [np.cos(lo), np.sin(lo)], plane @ [np.cos(hi), np.sin(hi)]], axis=1)
    W = np.abs(W) + 1e-3
    W /= np.linalg.norm(W, axis=0)
    if np.allclose(W[:, 0], W[:, 1], atol=1e-6):
        W[:, 1] = np.abs(W[:, 1] + rng.normal(scale=0.05, size=3)) + 1e-3
        W[:, 1] /= np.linalg.norm(W[:, 1])
    return W


def snmf(V, lam=DEFAULT_LAMBDA, seed=0, max_iter=MAX_ITER, tol=TOL, W0=None):
    """Sparse NMF ``V ~ W @ H`` with unit-norm columns of ``W``.

    Alternating exact block minimization.  ``H`` is solved exactly for the
    current ``W``.  Each row of ``W`` is then an exact two-variable
    nonnegative least-squares problem for the current ``H``.  Rescaling the
    columns of ``W`` to unit norm (with ``H`` rescaled so ``W @ H`` is
    unchanged) alters the L1 term, so the new ``W`` is blended back toward the
    old one until the objective does not rise.  The recorded objective is
    therefore non-increasing.  Stops when the relative decrease falls below
    ``tol``.  Raises ConvergenceError after ``max_iter`` iterations.

    Returns ``(W, H, history)``.
    """
    V = np.asarray(V, dtype=np.float64)
    rng = np.random.default_rng(seed)
    W = angular_init(V, rng) if W0 is None else np.asarray(W0, dtype=np.float64).copy()
    H = solve_concentrations(W, V, lam)
    f = snmf_objective(V, W, H, lam)
    history = [f]
    for _ in range(max_iter):
        H = solve_concentrations(W, V, lam)
        f_h = snmf_objective(V, W, H, lam)
        W_ls = solve_concentrations(H.T, V.T, 0.0).T
        step = 1.0
        W_new, H_new, f_w = W, H, f_h
        for _ in range(20):
            cand = (1 - step) * W + step * W_ls
            Wc, Hc = _normalize_columns(cand, H)
            if np.all(np.isfinite(Wc)):
                fc = snmf_objective(V, Wc, Hc, lam)
                if fc <= f_h:
                    W_new, H_new, f_w = Wc, Hc, fc
                    break
            step *= 0.5
        W, H = W_new, H_new
        prev, f = f, f_w
        history.append(f)
        if prev - f <= tol * max(abs(prev), 1e-300):
            return W, H, history
    residual = float(np.linalg.norm(V - W @ H) / max(np.linalg.norm(V), 1e-300))
    raise ConvergenceError(
        f"stain factorization did not converge in {max_iter} iterations "
        f"(relative residual {residual:.4g})", residual=residual)


def order_stains(W, H=None):
    """Hematoxylin-like column first: it is the one absorbing more red light."""
    if W[0, 0] >= W[0, 1]:
        return (W, H) if H is not None else W
    W = W[:, ::-1]
    return (W, H[::-1]) if H is not None else W


def estimate_stain_profile(image, lambda_sparsity=DEFAULT_LAMBDA, seed=0, max_pixels=MAX_PIXELS,
                           max_iter=MAX_ITER, return_history=False):
    """Fit a :class:`StainProfile` to the tissue pixels of ``image``.

    Pixels whose OD norm is below 0.15 count as background and are ignored.
    When there are more than ``max_pixels`` tissue pixels, a seeded random
    subset is used.  The reported 99th percentiles come from unpenalized
    nonnegative concentrations under the fitted stain matrix, the same solver
    :func:`normalize_stain` uses.
    """
    V = tissue_od(image)
    if V.shape[1] < MIN_TISSUE_PIXELS:
        raise InsufficientTissueError(
            f"only {V.shape[1]} pixels above OD {TISSUE_OD}; need at least {MIN_TISSUE_PIXELS}")
    rng = np.random.default_rng(seed)
    if V.shape[1] > max_pixels:
        V = V[:, rng.choice(V.shape[1], max_pixels, replace=False)]
    W, H, history = snmf(V, lambda_sparsity, seed, max_iter)
    W = order_stains(W)
    C = solve_concentrations(W, V, 0.0)
    p99 = np.percentile(C, 99, axis=1)
    profile = StainProfile(W, p99)
    return (profile, history) if return_history else profile


def normalize_stain(source, source_profile: StainProfile, target_profile: StainProfile):
    """Re-render ``source`` with the target's stain vectors and concentration range."""
    src = np.asarray(source)
    if src.shape[-1] != 3:
        raise DimensionError(f"expected RGB channels last, got shape {src.shape}")
    sp = source_profile.concentration_p99
    if np.any(sp <= 0) or not np.all(np.isfinite(sp)):
        raise DegenerateProfileError(f"source concentration percentiles {sp.tolist()} must be positive")
    od = optical_density(src).reshape(-1, 3).T
    C = solve_concentrations(source_profile.stain_matrix, od, 0.0)
    C *= (target_profile.concentration_p99 / sp)[:, None]
    out = od_to_rgb((target_profile.stain_matrix @ C).T).reshape(src.shape)
    return out.astype(src.dtype if np.issubdtype(src.dtype, np.floating) else np.float64)


def angular_distance_deg(u, v) -> float:
    u = np.asarray(u, float) / np.linalg.norm(u)
    v = np.asarray(v, float) / np.linalg.norm(v)
    return float(np.degrees(np.arccos(np.clip(abs(u @ v), -1.0, 1.0))))
