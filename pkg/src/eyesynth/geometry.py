"""Landmark alignment and non-rigid warping into the canonical UV layout.

Points are (u, v) pixel coordinates with pixel centres on integers:
u indexes columns, v indexes rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import format_landmarks, parse_landmarks

# Default canonical eye-region landmarks on a 256x256 UV raster. Order:
# right eye (outer corner, upper lid, inner corner, lower lid), left eye
# (inner corner, upper lid, outer corner, lower lid), right brow (outer,
# inner), left brow (inner, outer), nose bridge, nose tip.
DEFAULT_UV_SIZE = 256
DEFAULT_CANONICAL_LANDMARKS = np.array([
    [40.0, 120.0], [70.0, 104.0], [100.0, 122.0], [70.0, 134.0],
    [156.0, 122.0], [186.0, 104.0], [216.0, 120.0], [186.0, 134.0],
    [36.0, 84.0], [104.0, 78.0], [152.0, 78.0], [220.0, 84.0],
    [128.0, 118.0], [128.0, 196.0],
])


class DegenerateConfigurationError(ValueError):
    pass


class SingularWarpError(ValueError):
    pass


def _as_points(points, name="points") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name}: expected an (N, 2) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite coordinates")
    return arr


@dataclass(frozen=True)
class SimilarityTransform2D:
    """``x -> scale * R(rotation) @ x + translation``."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def linear(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    @property
    def matrix(self) -> np.ndarray:
        """2x3 affine matrix."""
        return np.hstack([self.linear, np.asarray(self.translation, float)[:, None]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + np.asarray(self.translation, float)

    def inverse(self) -> SimilarityTransform2D:
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.rotation), np.sin(-self.rotation)
        t = -inv_scale * np.array([[c, -s], [s, c]]) @ np.asarray(self.translation, float)
        return SimilarityTransform2D(inv_scale, -self.rotation, (float(t[0]), float(t[1])))


def fit_similarity(src, dst) -> tuple[SimilarityTransform2D, float]:
    """Least-squares similarity (no reflection) mapping ``src`` onto ``dst``.

    Returns the transform and the residual sum of squared distances.
    """
    src = _as_points(src, "src")
    dst = _as_points(dst, "dst")
    if len(src) != len(dst):
        raise ValueError(f"point count mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 2:
        raise ValueError("need at least 2 point pairs")
    # In complex form the model is dst = a * src + b with a = scale * e^{i rotation},
    # so the fit is an ordinary linear least-squares problem in a.
    zs = src[:, 0] + 1j * src[:, 1]
    zd = dst[:, 0] + 1j * dst[:, 1]
    ms, md = zs.mean(), zd.mean()
    zs_c, zd_c = zs - ms, zd - md
    denom = np.sum(np.abs(zs_c) ** 2)
    if denom <= 1e-12 * max(1.0, np.max(np.abs(zs)) ** 2):
        raise DegenerateConfigurationError("source landmarks are all coincident")
    a = np.sum(np.conj(zs_c) * zd_c) / denom
    if abs(a) == 0:
        raise DegenerateConfigurationError("destination landmarks are all coincident")
    b = md - a * ms
    tf = SimilarityTransform2D(float(abs(a)), float(np.angle(a)), (float(b.real), float(b.imag)))
    resid = float(np.sum((tf.apply(src) - dst) ** 2))
    return tf, resid


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # r^2 log r written in terms of r^2, with U(0) = 0
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


@dataclass(frozen=True)
class WarpField:
    """Thin-plate spline mapping ``f(x) = A x + t + sum_i w_i U(|x - c_i|)``.

    ``affine`` is 2x3 ``[A | t]``; ``weights`` holds one 2-vector per
    control point. ``target`` records where each control point lands.
    """

    control: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    affine: np.ndarray

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        out = flat @ self.affine[:, :2].T + self.affine[:, 2]
        # chunk to bound memory on large grids
        step = 65536
        for i in range(0, len(flat), step):
            blk = flat[i:i + step]
            d2 = np.sum((blk[:, None, :] - self.control[None, :, :]) ** 2, axis=-1)
            out[i:i + step] += _tps_kernel(d2) @ self.weights
        return out.reshape(pts.shape)

    def then_affine(self, matrix) -> WarpField:
        """Compose with a following affine map given as a 2x3 matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        lin, t = m[:, :2], m[:, 2]
        affine = np.hstack([lin @ self.affine[:, :2], (lin @ self.affine[:, 2] + t)[:, None]])
        return WarpField(self.control, self.target @ lin.T + t, self.weights @ lin.T, affine)


def fit_warp(src, dst, kernel: str = "tps") -> WarpField:
    """Exact thin-plate spline interpolant taking ``src`` points to ``dst``."""
    if kernel != "tps":
        raise ValueError(f"unsupported kernel {kernel!r}")
    src = _as_points(src, "src")
    dst = _as_points(dst, "dst")
    if len(src) != len(dst):
        raise ValueError(f"point count mismatch: {len(src)} vs {len(dst)}")
    n = len(src)
    d2 = np.sum((src[:, None, :] - src[None, :, :]) ** 2, axis=-1)
    if np.any(d2[np.triu_indices(n, 1)] == 0):
        raise SingularWarpError("duplicate source control points")
    P = np.hstack([np.ones((n, 1)), src])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = _tps_kernel(d2)
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    if np.linalg.cond(L) > 1e13:
        raise SingularWarpError("control points do not determine an affine part (need 3 non-collinear)")
    sol = np.linalg.solve(L, rhs)
    w, a = sol[:n], sol[n:]
    affine = np.hstack([a[1:].T, a[0][:, None]])
    return WarpField(src, dst, w, affine)


def identity_warp() -> WarpField:
    return WarpField(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)),
                     np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def raster_to_reference(points, out_shape, ref_shape) -> np.ndarray:
    """Map pixel coordinates of an ``out_shape`` raster into ``ref_shape`` pixel units.

    Uses the half-pixel-centre convention, so an identity warp sampled this
    way is a plain bilinear resize.
    """
    pts = np.asarray(points, dtype=np.float64)
    sx = ref_shape[1] / out_shape[1]
    sy = ref_shape[0] / out_shape[0]
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 0] + 0.5) * sx - 0.5
    out[..., 1] = (pts[..., 1] + 0.5) * sy - 0.5
    return out


def bilinear_sample(img: np.ndarray, coords: np.ndarray, border: float = -1.0) -> np.ndarray:
    """Sample ``img`` (H, W, C) at float (u, v) ``coords`` of shape (..., 2).

    Samples outside ``[0, W-1] x [0, H-1]`` take the ``border`` value.
    """
    h, w = img.shape[:2]
    u = coords[..., 0]
    v = coords[..., 1]
    tol = 1e-9
    inside = (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    out = top * (1 - fv) + bot * fv
    out[~inside] = border
    return out.astype(img.dtype, copy=False)


def apply_warp(img: np.ndarray, w: WarpField, out_size, border: float = -1.0) -> np.ndarray:
    """Backward-warp ``img`` onto an ``out_size`` raster.

    Output pixel ``p`` is first expressed in the input's pixel units (see
    :func:`raster_to_reference`), then sampled from ``img`` at ``w(p)``.
    """
    img = np.asarray(img)
    out_h, out_w = (out_size, out_size) if np.isscalar(out_size) else out_size
    vv, uu = np.mgrid[0:out_h, 0:out_w]
    grid = np.stack([uu, vv], axis=-1).astype(np.float64)
    ref = raster_to_reference(grid, (out_h, out_w), img.shape[:2])
    return bilinear_sample(img, w(ref), border=border)


@dataclass(frozen=True)
class UVTexture:
    image: np.ndarray
    source: str
    # maps UV-raster reference coordinates to face-image pixels
    mapping: WarpField


def extract_uv_texture(face: np.ndarray, lm, canon, uv_size: int = DEFAULT_UV_SIZE,
                       source: str = "", border: float = -1.0) -> UVTexture:
    """Warp a face image into the canonical UV layout.

    ``lm`` are landmarks on ``face`` in pixels; ``canon`` the matching
    canonical landmarks in pixels of the ``uv_size`` raster.
    """
    lm = _as_points(lm, "landmarks")
    canon = _as_points(canon, "canonical landmarks")
    if len(lm) != len(canon):
        raise ValueError(f"landmark count {len(lm)} does not match canonical count {len(canon)}")
    face = np.asarray(face)
    canon_ref = raster_to_reference(canon, (uv_size, uv_size), face.shape[:2])
    sim, _ = fit_similarity(lm, canon_ref)
    aligned = sim.apply(lm)
    if len(lm) >= 3:
        warp = fit_warp(canon_ref, aligned)
    else:
        warp = identity_warp()
    mapping = warp.then_affine(sim.inverse().matrix)
    tex = apply_warp(face, mapping, (uv_size, uv_size), border=border)
    return UVTexture(tex, source, mapping)


def load_canonical_landmarks(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("landmarks="):
        text = text[len("landmarks="):]
    return np.array(parse_landmarks(text), dtype=np.float64)


def save_canonical_landmarks(points, path) -> None:
    Path(path).write_text("landmarks=" + format_landmarks(np.asarray(points)) + "\n", encoding="utf-8")
