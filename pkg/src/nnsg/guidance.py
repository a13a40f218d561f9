"""3D structure guidance: depth and contour maps plus the inpainting mask.

The input face keeps its expression, texture and pose; only its identity is
blended with the retrieved prototype before rendering.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import EmptyRenderError, ValidationError
from .morphable import (
    FusionWeights,
    Mesh,
    N_PARAMS,
    ParamVector,
    fuse_identity,
    pose_to_transform,
    reconstruct_shape,
    reconstruct_texture,
)
from .pngio import encode_png, mask_to_uint8
from .protodb import NearestPrototypeSearch
from .renderer import Camera, RenderedFace, rasterize, silhouette_mask
from .validation import check_same_shape, check_unit_interval

DEFAULT_OMEGA = 0.3  # contour branch
DEFAULT_ETA = 0.5  # depth branch
DEFAULT_DILATION_AT_512 = 8
LUMA = np.array([0.299, 0.587, 0.114])

DEPTH_MODES = ("inverse", "direct")


def scaled_dilation(size, base=DEFAULT_DILATION_AT_512):
    """Mask dilation radius scaled linearly from ``base`` px at 512 px."""
    return int(round(base * int(size) / 512.0))


@dataclass(frozen=True)
class GuidanceConfig:
    fusion: FusionWeights = field(default_factory=FusionWeights)
    omega: float = DEFAULT_OMEGA
    eta: float = DEFAULT_ETA
    canny_sigma: float = 1.4
    canny_low: float = 0.1
    canny_high: float = 0.2
    dilation_px: int = None
    depth_mode: str = "inverse"
    shade: bool = False

    def __post_init__(self):
        object.__setattr__(self, "omega", check_unit_interval(self.omega, "omega"))
        object.__setattr__(self, "eta", check_unit_interval(self.eta, "eta"))
        if self.depth_mode not in DEPTH_MODES:
            raise ValidationError(f"depth_mode must be one of {DEPTH_MODES}")
        if self.dilation_px is not None and int(self.dilation_px) < 0:
            raise ValidationError("dilation_px must be >= 0")
        _check_canny_args(self.canny_sigma, self.canny_low, self.canny_high)


@dataclass(frozen=True)
class GuidanceBundle:
    """Images and weights handed to a depth/contour conditioned generator."""

    depth_map: np.ndarray  # uint16
    contour_map: np.ndarray  # uint8, {0, 255}
    inpaint_mask: np.ndarray  # uint8, {0, 255}
    omega: float
    eta: float
    meta: dict
    render: RenderedFace = None

    def __post_init__(self):
        check_same_shape(
            [self.depth_map, self.contour_map, self.inpaint_mask],
            ["depth_map", "contour_map", "inpaint_mask"],
        )
        check_unit_interval(self.omega, "omega")
        check_unit_interval(self.eta, "eta")

    @property
    def weights(self):
        return self.omega, self.eta

    def png_payloads(self):
        return {
            "depth.png": encode_png(self.depth_map),
            "contour.png": encode_png(self.contour_map),
            "mask.png": encode_png(self.inpaint_mask),
        }

    def manifest(self):
        return {
            "files": {"depth": "depth.png", "contour": "contour.png", "mask": "mask.png"},
            "size": [int(self.depth_map.shape[1]), int(self.depth_map.shape[0])],
            "omega": self.omega,
            "eta": self.eta,
            **self.meta,
            "prompt": self.meta.get("prompt", ""),
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, payload in self.png_payloads().items():
            (out_dir / name).write_bytes(payload)
        text = json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n"
        (out_dir / "manifest.json").write_text(text, encoding="utf-8")
        return out_dir


def depth_map(face, mode="inverse"):
    """Min-max normalise covered depths to 16 bits; uncovered pixels are 0.

    In ``inverse`` mode the nearest covered pixel maps to 65535 and the
    farthest to 0; ``direct`` flips that. A constant-depth render maps every
    covered pixel to 65535.
    """
    if mode not in DEPTH_MODES:
        raise ValidationError(f"mode must be one of {DEPTH_MODES}")
    cov = face.coverage
    if not cov.any():
        raise EmptyRenderError("empty render: no covered pixels")
    z = face.depth[cov]
    zmin, zmax = z.min(), z.max()
    out = np.zeros(cov.shape, dtype=np.uint16)
    if zmax == zmin:
        out[cov] = 65535
        return out
    frac = (zmax - z) / (zmax - zmin) if mode == "inverse" else (z - zmin) / (zmax - zmin)
    out[cov] = np.rint(frac * 65535.0).astype(np.uint16)
    return out


def _check_canny_args(sigma, low, high):
    if not sigma > 0:
        raise ValidationError(f"canny sigma must be > 0, got {sigma}")
    if not low < high:
        raise ValidationError(f"canny thresholds need low < high, got {low} >= {high}")
    if low < 0:
        raise ValidationError("canny low threshold must be >= 0")


# neighbour offsets (drow, dcol) along the quantised gradient direction
_NMS_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


def canny(image, sigma=1.4, low=0.1, high=0.2):
    """Canny edges of a grayscale image as uint8 {0, 255}.

    ``low`` and ``high`` are fractions of the peak gradient magnitude.
    """
    _check_canny_args(sigma, low, high)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"canny expects a 2-D grayscale image, got {img.shape}")

    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    out = np.zeros(img.shape, dtype=np.uint8)
    # flat images have only rounding noise for gradient
    if peak <= 1e-12 * max(1.0, np.abs(img).max()):
        return out

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    padded = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dr, dc) in enumerate(_NMS_OFFSETS):
        fwd = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        bwd = padded[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        # >= on one side, > on the other: a symmetric ridge keeps one pixel
        keep |= (sector == s) & (mag >= fwd) & (mag > bwd)
    nms = np.where(keep, mag, 0.0)

    weak = nms >= low * peak
    weak &= nms > 0
    strong = nms >= high * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n:
        hit = np.zeros(n + 1, dtype=bool)
        hit[np.unique(labels[strong])] = True
        hit[0] = False
        out[hit[labels]] = 255
    return out


def to_grayscale(color):
    return np.asarray(color, dtype=np.float64)[..., :3] @ LUMA


def fused_mesh(input_params, reference_params, basis, fusion=None):
    """Mesh with blended identity and the input face's expression and texture."""
    alpha = fuse_identity(input_params.alpha, reference_params.alpha, fusion)
    return Mesh(
        reconstruct_shape(basis, alpha, input_params.beta),
        reconstruct_texture(basis, input_params.delta),
        basis.triangles,
    )


def extract_guidance(input_params, reference_params, basis, camera, cfg=None,
                     reference_id=None, n_threads=None):
    """Fuse identities, render in the input pose, derive depth/contour/mask.

    Only the reference identity block is read; its expression, texture, pose
    and lighting are ignored.
    """
    cfg = cfg if cfg is not None else GuidanceConfig()
    mesh = fused_mesh(input_params, reference_params, basis, cfg.fusion)
    pose = pose_to_transform(input_params.pose)
    lighting = input_params.gamma if cfg.shade else None
    face = rasterize(mesh, pose, camera, lighting=lighting, n_threads=n_threads)

    depth = depth_map(face, cfg.depth_mode)
    contour = canny(to_grayscale(face.color), cfg.canny_sigma, cfg.canny_low, cfg.canny_high)
    dilation = cfg.dilation_px if cfg.dilation_px is not None else scaled_dilation(camera.width)
    mask = mask_to_uint8(silhouette_mask(face, dilation))

    meta = {
        "lambda": cfg.fusion.lam,
        "mu": cfg.fusion.mu,
        "camera": camera.to_dict(),
        "pose": input_params.pose.tolist(),
        "reference_id": reference_id,
        "dilation_px": int(dilation),
        "depth_mode": cfg.depth_mode,
    }
    return GuidanceBundle(depth, contour, mask, cfg.omega, cfg.eta, meta, face)


def combine_guidance(x_denoised, y_c, y_d, omega=DEFAULT_OMEGA, eta=DEFAULT_ETA):
    """Next latent ``x_denoised + omega * y_c + eta * y_d`` (elementwise)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in (x_denoised, y_c, y_d)]
    check_same_shape(arrays, ["x_denoised", "y_c", "y_d"])
    for a, name in zip(arrays, ("x_denoised", "y_c", "y_d")):
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"{name} contains non-finite values")
    omega = check_unit_interval(omega, "omega")
    eta = check_unit_interval(eta, "eta")
    x, yc, yd = arrays
    out = x.copy()
    # zero-weight branches are skipped so a disabled branch is an exact no-op
    if omega != 0.0:
        out = out + omega * yc
    if eta != 0.0:
        out = out + eta * yd
    return out


class GuidanceExtractor(BaseEstimator, TransformerMixin):
    """Search the nearest prototype, then extract guidance for each input face.

    ``fit`` indexes a :class:`~nnsg.protodb.PrototypeDatabase`; ``transform``
    maps ParamVectors (or an ``(n, 239)`` array) to GuidanceBundles.
    """

    def __init__(self, basis=None, size=512, lam=0.5, mu=0.5, omega=DEFAULT_OMEGA,
                 eta=DEFAULT_ETA, dilation_px=None, canny_sigma=1.4, canny_low=0.1,
                 canny_high=0.2, depth_mode="inverse", focal_at_224=1015.0,
                 n_jobs=None):
        self.basis = basis
        self.size = size
        self.lam = lam
        self.mu = mu
        self.omega = omega
        self.eta = eta
        self.dilation_px = dilation_px
        self.canny_sigma = canny_sigma
        self.canny_low = canny_low
        self.canny_high = canny_high
        self.depth_mode = depth_mode
        self.focal_at_224 = focal_at_224
        self.n_jobs = n_jobs

    def _config(self):
        return GuidanceConfig(
            fusion=FusionWeights(self.lam, self.mu),
            omega=self.omega,
            eta=self.eta,
            canny_sigma=self.canny_sigma,
            canny_low=self.canny_low,
            canny_high=self.canny_high,
            dilation_px=self.dilation_px,
            depth_mode=self.depth_mode,
        )

    def fit(self, X, y=None):
        if self.basis is None:
            raise ValidationError("GuidanceExtractor needs a basis")
        self.config_ = self._config()
        self.camera_ = Camera.for_size(self.size, self.focal_at_224)
        self.search_ = NearestPrototypeSearch(n_neighbors=1, n_jobs=self.n_jobs).fit(X)
        return self

    def transform(self, X):
        if not hasattr(self, "search_"):
            raise NotFittedError("GuidanceExtractor is not fitted; call fit first")
        faces = _as_param_list(X)
        db = self.search_.database_
        sims, idx = self.search_.kneighbors(np.stack([f.alpha for f in faces]))
        bundles = []
        for face, i, s in zip(faces, idx[:, 0], sims[:, 0]):
            ref = db[int(i)]
            bundle = extract_guidance(
                face, ref.params, self.basis, self.camera_, self.config_,
                reference_id=ref.id, n_threads=self.n_jobs,
            )
            bundle.meta["reference_index"] = int(i)
            bundle.meta["reference_score"] = float(s)
            bundles.append(bundle)
        return bundles


def _as_param_list(X):
    if isinstance(X, ParamVector):
        return [X]
    if isinstance(X, (list, tuple)) and all(isinstance(x, ParamVector) for x in X):
        return list(X)
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != N_PARAMS:
        raise ValidationError(f"expected (n, {N_PARAMS}) parameters, got {arr.shape}")
    return [ParamVector.from_array(row) for row in arr]

