"""Deterministic software rasterizer for reconstructed faces.

View space follows the pinhole convention: x right, y down, z forward.
Projected vertices are snapped to a 1/256 px grid and view depths to a
2**-20 grid before scan conversion. Edge tests then run in exact integer
arithmetic, so shared edges are seam-free under the top-left rule, and
renders are reproducible bit-for-bit regardless of worker count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .morphable import N_LIGHT, pose_to_transform
from .protodb import resolve_threads
from .validation import check_vector, readonly

logger = logging.getLogger(__name__)

SUBPIXEL = 256
DEPTH_QUANTUM = 2.0 ** -20
# keeps int64 edge-function products exact
_MAX_FIXED = 2 ** 30

SH_Y00 = 0.5 / np.sqrt(np.pi)
_SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))
_SH_C2 = 0.5 * np.sqrt(15.0 / np.pi)
_SH_C20 = 0.25 * np.sqrt(5.0 / np.pi)
_SH_C22 = 0.25 * np.sqrt(15.0 / np.pi)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``principal`` defaults to the image center."""

    focal_px: float
    width: int
    height: int
    principal: tuple = None
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        if not (np.isfinite(self.focal_px) and self.focal_px > 0):
            raise ValidationError(f"focal_px must be positive, got {self.focal_px}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValidationError(f"image size must be positive, got {self.width}x{self.height}")
        if not 0 < self.near < self.far:
            raise ValidationError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.principal is None:
            object.__setattr__(self, "principal", (self.width / 2.0, self.height / 2.0))
        else:
            px, py = self.principal
            object.__setattr__(self, "principal", (float(px), float(py)))

    @classmethod
    def for_size(cls, size, focal_at_224=1015.0, near=1.0, far=50.0):
        """Square camera whose focal length scales from the 224 px convention."""
        size = int(size)
        return cls(focal_at_224 * size / 224.0, size, size, near=near, far=far)

    def to_dict(self):
        return {
            "focal_px": self.focal_px,
            "width": self.width,
            "height": self.height,
            "principal": list(self.principal),
            "near": self.near,
            "far": self.far,
        }


@dataclass(frozen=True)
class RenderedFace:
    """Color, view depth (``inf`` where uncovered) and coverage."""

    color: np.ndarray
    depth: np.ndarray
    coverage: np.ndarray

    def __post_init__(self):
        for name in ("color", "depth", "coverage"):
            object.__setattr__(self, name, readonly(getattr(self, name)))

    @property
    def shape(self):
        return self.coverage.shape


def _as_transform(pose):
    if isinstance(pose, tuple) and len(pose) == 2:
        R, t = pose
        R = np.asarray(R, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {R.shape}")
        return R, check_vector(t, 3, "translation")
    return pose_to_transform(pose)


def project_vertices(positions, pose, camera):
    """Project flat xyz positions through ``pose`` and ``camera``.

    Returns ``(x_px, y_px, z_view, behind)`` where ``behind`` flags vertices
    with ``z_view <= near``; their pixel coordinates are not meaningful.
    """
    R, t = _as_transform(pose)
    verts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    view = verts @ R.T + t
    z = view[:, 2]
    behind = z <= camera.near
    safe_z = np.where(behind, 1.0, z)
    cx, cy = camera.principal
    x = camera.focal_px * (view[:, 0] / safe_z) + cx
    y = camera.focal_px * (view[:, 1] / safe_z) + cy
    return x, y, z, behind


def _clip_near(pts, cols, near):
    """Clip one triangle against ``z >= near``; returns a list of triangles."""
    out_p, out_c = [], []
    for i in range(3):
        j = (i + 1) % 3
        pi, pj = pts[i], pts[j]
        in_i, in_j = pi[2] >= near, pj[2] >= near
        if in_i:
            out_p.append(pi)
            out_c.append(cols[i])
        if in_i != in_j:
            s = (near - pi[2]) / (pj[2] - pi[2])
            p = pi + s * (pj - pi)
            p[2] = near
            out_p.append(p)
            out_c.append(cols[i] + s * (cols[j] - cols[i]))
    return [
        (np.array([out_p[0], out_p[k], out_p[k + 1]]),
         np.array([out_c[0], out_c[k], out_c[k + 1]]))
        for k in range(1, len(out_p) - 1)
    ]


def _owns(dx, dy):
    # top-left rule for the winding where interior edge functions are positive
    return (dy < 0) | ((dy == 0) & (dx > 0))


class _Setup:
    """Triangles snapped to fixed point, in submission order."""

    def __init__(self, view_tris, color_tris, camera):
        n = len(view_tris)
        self.n = n
        if n == 0:
            return
        cx, cy = camera.principal
        z = view_tris[:, :, 2]
        x = camera.focal_px * view_tris[:, :, 0] / z + cx
        y = camera.focal_px * view_tris[:, :, 1] / z + cy
        with np.errstate(invalid="ignore"):
            ok = (np.abs(x) * SUBPIXEL < _MAX_FIXED).all(1) & (np.abs(y) * SUBPIXEL < _MAX_FIXED).all(1)
        if not ok.all():
            logger.debug("dropping %d triangles outside the guard band", int((~ok).sum()))
        X = np.where(ok[:, None], np.rint(x * SUBPIXEL), 0).astype(np.int64)
        Y = np.where(ok[:, None], np.rint(y * SUBPIXEL), 0).astype(np.int64)
        Z = np.maximum(np.rint(z / DEPTH_QUANTUM) * DEPTH_QUANTUM, camera.near)

        area = (X[:, 1] - X[:, 0]) * (Y[:, 2] - Y[:, 0]) - (Y[:, 1] - Y[:, 0]) * (X[:, 2] - X[:, 0])
        flip = area < 0
        for arr in (X, Y, Z):
            arr[flip, 1], arr[flip, 2] = arr[flip, 2].copy(), arr[flip, 1].copy()
        colors = color_tris.copy()
        colors[flip, 1], colors[flip, 2] = color_tris[flip, 2], color_tris[flip, 1]

        self.keep = ok & (area != 0)
        self.X, self.Y, self.Z, self.colors = X, Y, Z, colors
        self.area = np.abs(area)
        half = SUBPIXEL // 2
        # inclusive pixel ranges whose centres can fall inside the bbox
        self.i0 = -((-(X.min(1) - half)) // SUBPIXEL)
        self.i1 = (X.max(1) - half) // SUBPIXEL
        self.j0 = -((-(Y.min(1) - half)) // SUBPIXEL)
        self.j1 = (Y.max(1) - half) // SUBPIXEL


def _raster_band(setup, camera, r0, r1, color, depth):
    """Scan-convert every triangle into rows ``[r0, r1)``, in order."""
    width = camera.width
    half = SUBPIXEL // 2
    far, near = camera.far, camera.near
    hit = (
        setup.keep & (setup.j1 >= r0) & (setup.j0 < r1)
        & (setup.i1 >= 0) & (setup.i0 < width)
    )
    for k in np.flatnonzero(hit):
        i0, i1 = max(int(setup.i0[k]), 0), min(int(setup.i1[k]), width - 1)
        j0, j1 = max(int(setup.j0[k]), r0), min(int(setup.j1[k]), r1 - 1)
        if i0 > i1 or j0 > j1:
            continue
        px = np.arange(i0, i1 + 1, dtype=np.int64) * SUBPIXEL + half
        py = np.arange(j0, j1 + 1, dtype=np.int64)[:, None] * SUBPIXEL + half
        X, Y = setup.X[k], setup.Y[k]

        weights, inside = [], True
        for a, b in ((1, 2), (2, 0), (0, 1)):
            dx, dy = X[b] - X[a], Y[b] - Y[a]
            e = dx * (py - Y[a]) - dy * (px - X[a])
            inside = inside & ((e > 0) | ((e == 0) & _owns(dx, dy)))
            weights.append(e)
        if not np.any(inside):
            continue

        area = float(setup.area[k])
        Z = setup.Z[k]
        l0, l1, l2 = (w[inside] / area for w in weights)
        inv_z = l0 / Z[0] + l1 / Z[1] + l2 / Z[2]
        z = 1.0 / inv_z

        rows, cols = np.nonzero(inside)
        rows += j0 - r0
        cols += i0
        cur = depth[rows, cols]
        win = (z < cur) & (z <= far)
        if not win.any():
            continue
        rows, cols, z = rows[win], cols[win], z[win]
        l0, l1, l2 = l0[win] / Z[0], l1[win] / Z[1], l2[win] / Z[2]
        C = setup.colors[k]
        rgb = (l0[:, None] * C[0] + l1[:, None] * C[1] + l2[:, None] * C[2]) * z[:, None]
        depth[rows, cols] = np.clip(z, near, far)
        color[rows, cols] = np.clip(rgb, 0.0, 1.0)


def rasterize(mesh, pose, camera, lighting=None, n_threads=None):
    """Z-buffered render of ``mesh`` seen through ``pose`` and ``camera``.

    ``pose`` is a 6-value pose vector or an ``(R, t)`` pair. With ``lighting``
    (9 SH coefficients) vertex colors are shaded by view-space normals;
    otherwise colors are used as-is. Colors and depth are interpolated
    perspective-correctly; nearer fragments win, an exact tie keeps the
    earlier triangle.
    """
    R, t = _as_transform(pose)
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)

    verts = mesh.vertices @ R.T + t
    cols = mesh.colors.reshape(-1, 3)
    if lighting is not None:
        normals = compute_normals(mesh).reshape(-1, 3) @ R.T
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        cols = shade_sh(normals.ravel(), cols.ravel(), lighting).reshape(-1, 3)

    tris = mesh.triangles
    view_tris = verts[tris] if len(tris) else np.zeros((0, 3, 3))
    color_tris = cols[tris] if len(tris) else np.zeros((0, 3, 3))

    z = view_tris[:, :, 2]
    front = (z >= camera.near).all(1)
    partial = ~front & (z >= camera.near).any(1)
    tri_p, tri_c = [view_tris[front]], [color_tris[front]]
    order = [np.flatnonzero(front)]
    for k in np.flatnonzero(partial):
        for p, c in _clip_near(view_tris[k], color_tris[k], camera.near):
            tri_p.append(p[None])
            tri_c.append(c[None])
            order.append(np.array([k]))
    # preserve submission order so z-ties resolve identically everywhere
    order = np.concatenate(order)
    perm = np.argsort(order, kind="stable")
    setup = _Setup(
        np.concatenate(tri_p)[perm], np.concatenate(tri_c)[perm], camera
    )

    if setup.n:
        n_threads = min(resolve_threads(n_threads), h)
        bounds = np.linspace(0, h, n_threads + 1).astype(int)
        bands = [(bounds[i], bounds[i + 1]) for i in range(n_threads) if bounds[i] < bounds[i + 1]]

        def run(band):
            r0, r1 = band
            _raster_band(setup, camera, r0, r1, color[r0:r1], depth[r0:r1])

        if len(bands) == 1:
            run(bands[0])
        else:
            with ThreadPoolExecutor(max_workers=len(bands)) as pool:
                list(pool.map(run, bands))

    coverage = np.isfinite(depth)
    return RenderedFace(color, depth, coverage)


def sh_basis(normals):
    """Real spherical harmonics up to band 2 at unit ``normals``, shape (N, 9)."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    return np.stack([
        np.full_like(x, SH_Y00),
        _SH_C1 * y,
        _SH_C1 * z,
        _SH_C1 * x,
        _SH_C2 * x * y,
        _SH_C2 * y * z,
        _SH_C20 * (3.0 * z ** 2 - 1.0),
        _SH_C2 * x * z,
        _SH_C22 * (x ** 2 - y ** 2),
    ], axis=1)


def shade_sh(normals, colors, gamma):
    """Scale each vertex color by the SH irradiance ``sum_k gamma_k Y_k(n)``."""
    gamma = check_vector(gamma, N_LIGHT, "gamma")
    n = check_vector(normals, name="normals").reshape(-1, 3)
    c = check_vector(colors, n.size, "colors").reshape(-1, 3)
    lengths = np.linalg.norm(n, axis=1)
    if np.any(np.abs(lengths - 1.0) > 1e-6):
        raise ValidationError("normals must be unit length (tolerance 1e-6)")
    irradiance = sh_basis(n) @ gamma
    return np.clip(c * irradiance[:, None], 0.0, 1.0).ravel()


def compute_normals(mesh):
    """Area-weighted unit vertex normals; vertices with no area get +z."""
    v = mesh.vertices
    acc = np.zeros_like(v)
    tris = mesh.triangles
    if len(tris):
        face = np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])
        for corner in range(3):
            np.add.at(acc, tris[:, corner], face)
    norm = np.linalg.norm(acc, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (len(v), 1))
    ok = norm > 0
    out[ok] = acc[ok] / norm[ok, None]
    return out.ravel()


def silhouette_mask(face, dilation_px):
    """Coverage grown by a (2r+1)-square structuring element (Chebyshev disc)."""
    r = int(dilation_px)
    if r < 0:
        raise ValidationError(f"dilation must be >= 0, got {dilation_px}")
    cov = np.asarray(face.coverage if isinstance(face, RenderedFace) else face, dtype=bool)
    if r == 0:
        return cov.copy()
    return ndimage.maximum_filter(cov, size=2 * r + 1, mode="constant", cval=False)
