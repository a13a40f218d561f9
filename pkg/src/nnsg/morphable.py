"""Linear 3D morphable face model.

A face is described by a 239-value parameter vector split into identity,
expression, texture, pose and lighting blocks. Shape and texture are
recovered as the mean plus a linear combination of PCA basis columns::

    S = mean_shape + B_id @ alpha + B_exp @ beta
    T = mean_texture + B_tex @ delta
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionError,
    ParseError,
    TruncatedFileError,
    ValidationError,
)
from .validation import check_finite_scalar, check_vector, readonly

N_ID = 80
N_EXP = 64
N_TEX = 80
N_POSE = 6
N_LIGHT = 9
N_PARAMS = N_ID + N_EXP + N_TEX + N_POSE + N_LIGHT

# (name, length) in storage order
PARAM_LAYOUT = (
    ("alpha", N_ID),
    ("beta", N_EXP),
    ("delta", N_TEX),
    ("pose", N_POSE),
    ("gamma", N_LIGHT),
)

BASIS_MAGIC = b"NNSGBAS1"


@dataclass(frozen=True)
class ParamVector:
    """Decoupled face description: identity, expression, texture, pose, lighting.

    ``pose`` holds three rotation angles in radians (pitch about x, yaw about y,
    roll about z) followed by a translation.
    """

    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    pose: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name, length in PARAM_LAYOUT:
            arr = check_vector(getattr(self, name), length, name)
            object.__setattr__(self, name, readonly(arr))

    @classmethod
    def from_array(cls, x):
        x = check_vector(x, N_PARAMS, "parameter vector")
        parts, start = {}, 0
        for name, length in PARAM_LAYOUT:
            parts[name] = x[start:start + length]
            start += length
        return cls(**parts)

    @classmethod
    def zeros(cls):
        return cls.from_array(np.zeros(N_PARAMS))

    def to_array(self):
        return np.concatenate([getattr(self, name) for name, _ in PARAM_LAYOUT])

    def replace(self, **changes):
        parts = {name: getattr(self, name) for name, _ in PARAM_LAYOUT}
        parts.update(changes)
        return ParamVector(**parts)

    def to_dict(self):
        return {name: getattr(self, name).tolist() for name, _ in PARAM_LAYOUT}

    @classmethod
    def from_dict(cls, data, source=None):
        missing = [name for name, _ in PARAM_LAYOUT if name not in data]
        if missing:
            raise ParseError(f"missing keys {missing}", path=source)
        parts = {}
        for name, length in PARAM_LAYOUT:
            values = data[name]
            if not isinstance(values, list) or len(values) != length:
                got = len(values) if isinstance(values, list) else type(values).__name__
                raise ParseError(
                    f"'{name}' must hold {length} numbers, got {got}", path=source
                )
            try:
                parts[name] = np.asarray(values, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ParseError(f"'{name}': {exc}", path=source) from None
        try:
            return cls(**parts)
        except ValidationError as exc:
            raise ParseError(str(exc), path=source) from None


def load_params(path):
    """Read one face's parameters from a JSON object file.

    Returns ``(params, face_id)``; ``face_id`` is ``None`` when absent.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    if not isinstance(data, dict):
        raise ParseError("top level must be an object", path=path)
    face_id = data.get("id")
    if face_id is not None and not isinstance(face_id, str):
        raise ParseError("'id' must be a string", path=path)
    return ParamVector.from_dict(data, source=path), face_id


def save_params(params, path, face_id=None):
    data = params.to_dict()
    if face_id is not None:
        data["id"] = face_id
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class MorphableBasis:
    """Mean shape/texture, PCA bases (3*N_v rows each) and triangle topology."""

    mean_shape: np.ndarray
    mean_texture: np.ndarray
    b_id: np.ndarray
    b_exp: np.ndarray
    b_tex: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        mean_shape = check_vector(self.mean_shape, name="mean_shape")
        if mean_shape.shape[0] % 3:
            raise DimensionError("mean_shape", "a multiple of 3", mean_shape.shape[0])
        rows = mean_shape.shape[0]
        object.__setattr__(self, "mean_shape", readonly(mean_shape))
        object.__setattr__(
            self, "mean_texture",
            readonly(check_vector(self.mean_texture, rows, "mean_texture")),
        )
        for name, cols in (("b_id", N_ID), ("b_exp", N_EXP), ("b_tex", N_TEX)):
            mat = np.asarray(getattr(self, name), dtype=np.float64)
            if mat.shape != (rows, cols):
                raise DimensionError(name, (rows, cols), mat.shape)
            if not np.all(np.isfinite(mat)):
                raise ValidationError(f"{name} contains non-finite values")
            object.__setattr__(self, name, readonly(mat))

        tris = np.asarray(self.triangles)
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise DimensionError("triangles", "(n_tris, 3)", tris.shape)
        tris = tris.astype(np.int64)
        n_v = rows // 3
        if tris.size and (tris.min() < 0 or tris.max() >= n_v):
            raise ValidationError(f"triangle index out of range [0, {n_v})")
        degenerate = (
            (tris[:, 0] == tris[:, 1])
            | (tris[:, 1] == tris[:, 2])
            | (tris[:, 0] == tris[:, 2])
        )
        if degenerate.any():
            raise ValidationError(
                f"degenerate triangle at index {int(np.argmax(degenerate))}"
            )
        object.__setattr__(self, "triangles", readonly(tris))

    @property
    def n_vertices(self):
        return self.mean_shape.shape[0] // 3

    @property
    def n_triangles(self):
        return self.triangles.shape[0]


@dataclass(frozen=True)
class Mesh:
    """Reconstructed face: flat xyz positions, flat RGB colors in [0, 1]."""

    positions: np.ndarray
    colors: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        pos = check_vector(self.positions, name="positions")
        col = check_vector(self.colors, pos.shape[0], "colors")
        if pos.shape[0] % 3:
            raise DimensionError("positions", "a multiple of 3", pos.shape[0])
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= pos.shape[0] // 3):
            raise ValidationError("triangle index out of range")
        object.__setattr__(self, "positions", readonly(pos))
        object.__setattr__(self, "colors", readonly(np.clip(col, 0.0, 1.0)))
        object.__setattr__(self, "triangles", readonly(tris))

    @property
    def vertices(self):
        return self.positions.reshape(-1, 3)

    def to_obj(self):
        """Wavefront text with 1-based face indices."""
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.triangles]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FusionWeights:
    """Weights on the input (``lam``) and reference (``mu``) identity."""

    lam: float = 0.5
    mu: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "lam", check_finite_scalar(self.lam, "lambda"))
        object.__setattr__(self, "mu", check_finite_scalar(self.mu, "mu"))


def reconstruct_shape(basis, alpha, beta):
    alpha = check_vector(alpha, N_ID, "alpha")
    beta = check_vector(beta, N_EXP, "beta")
    return basis.mean_shape + basis.b_id @ alpha + basis.b_exp @ beta


def reconstruct_texture(basis, delta):
    """Mean texture plus texture offsets, clamped to the [0, 1] gamut."""
    delta = check_vector(delta, N_TEX, "delta")
    return np.clip(basis.mean_texture + basis.b_tex @ delta, 0.0, 1.0)


def reconstruct_mesh(basis, alpha, beta, delta):
    return Mesh(
        reconstruct_shape(basis, alpha, beta),
        reconstruct_texture(basis, delta),
        basis.triangles,
    )


def fuse_identity(alpha_in, alpha_ref, weights=None):
    """Weighted sum ``lam * alpha_in + mu * alpha_ref`` of two identities."""
    w = weights if weights is not None else FusionWeights()
    alpha_in = check_vector(alpha_in, N_ID, "alpha_in")
    alpha_ref = check_vector(alpha_ref, N_ID, "alpha_ref")
    return w.lam * alpha_in + w.mu * alpha_ref


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_to_transform(pose):
    """Map ``[pitch, yaw, roll, tx, ty, tz]`` to ``(R, t)``.

    ``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)``, angles in radians.
    """
    pose = check_vector(pose, N_POSE, "pose")
    pitch, yaw, roll = pose[:3]
    return _rz(roll) @ _ry(yaw) @ _rx(pitch), pose[3:].copy()


def inverse_rotation(pose):
    """Negated angles composed in reverse order; the inverse of ``pose_to_transform``'s R."""
    pose = check_vector(pose, N_POSE, "pose")
    pitch, yaw, roll = pose[:3]
    return _rx(-pitch) @ _ry(-yaw) @ _rz(-roll)


# -- basis file --------------------------------------------------------------

_BASIS_HEADER = struct.Struct("<8sII")


def basis_nbytes(n_vertices, n_tris):
    rows = 3 * n_vertices
    n_floats = rows * (2 + N_ID + N_EXP + N_TEX)
    return _BASIS_HEADER.size + 4 * n_floats + 4 * 3 * n_tris


def save_basis(basis, path):
    rows = 3 * basis.n_vertices
    chunks = [_BASIS_HEADER.pack(BASIS_MAGIC, basis.n_vertices, basis.n_triangles)]
    chunks.append(basis.mean_shape.astype("<f4").tobytes())
    chunks.append(basis.mean_texture.astype("<f4").tobytes())
    for mat in (basis.b_id, basis.b_exp, basis.b_tex):
        assert mat.shape[0] == rows
        chunks.append(mat.astype("<f4").tobytes(order="F"))
    chunks.append(basis.triangles.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_basis(path):
    """Read a little-endian basis file; bases are stored column-major."""
    raw = Path(path).read_bytes()
    if len(raw) < _BASIS_HEADER.size:
        raise TruncatedFileError(_BASIS_HEADER.size, len(raw), "basis header")
    magic, n_v, n_tris = _BASIS_HEADER.unpack_from(raw)
    if magic != BASIS_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {BASIS_MAGIC!r}")
    expected = basis_nbytes(n_v, n_tris)
    if len(raw) != expected:
        raise TruncatedFileError(expected, len(raw), "basis file")

    rows = 3 * n_v
    offset = _BASIS_HEADER.size

    def take(count):
        nonlocal offset
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return arr.astype(np.float64)

    mean_shape = take(rows)
    mean_texture = take(rows)
    mats = [take(rows * cols).reshape((rows, cols), order="F") for cols in (N_ID, N_EXP, N_TEX)]
    tris = np.frombuffer(raw, dtype="<u4", count=3 * n_tris, offset=offset)
    return MorphableBasis(mean_shape, mean_texture, *mats, tris.reshape(-1, 3))


# -- synthetic basis ---------------------------------------------------------

def grid_triangles(rows, cols):
    """Two triangles per grid cell, wound so normals face -z (toward the camera)."""
    tris = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            v00 = i * cols + j
            v01, v10, v11 = v00 + 1, v00 + cols, v00 + cols + 1
            tris.append((v00, v10, v01))
            tris.append((v01, v10, v11))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def _smooth_fields(u, v, n_fields, rng, n_terms=4, max_freq=2.0):
    """Random low-frequency scalar fields over the (u, v) grid, one per column."""
    out = np.zeros((u.size, n_fields))
    for k in range(n_fields):
        freqs = rng.uniform(0.3, max_freq, size=(n_terms, 2))
        phases = rng.uniform(0, 2 * np.pi, size=n_terms)
        amps = rng.normal(size=n_terms)
        acc = sum(
            a * np.cos(np.pi * (fu * u + fv * v) + ph)
            for a, (fu, fv), ph in zip(amps, freqs, phases)
        )
        out[:, k] = acc / np.sqrt(n_terms)
    return out


def synthetic_basis(rows=2, cols=4, seed=0):
    """Deterministic face-like basis on a ``rows x cols`` vertex grid.

    The mean shape is a domed surface bulging toward -z with a nose ridge;
    image-y points down so the forehead sits at negative y. Basis columns are
    smooth random displacement and color fields with decaying variance.
    """
    if rows < 2 or cols < 2:
        raise ValidationError("synthetic basis needs at least a 2x2 grid")
    rng = np.random.default_rng(seed)
    u, v = np.meshgrid(np.linspace(-1, 1, cols), np.linspace(-1, 1, rows))
    u, v = u.ravel(), v.ravel()
    n_v = u.size

    # square grid to rounded outline
    x = u * np.sqrt(1.0 - 0.5 * v ** 2)
    y = v * np.sqrt(1.0 - 0.5 * u ** 2)
    dome = np.sqrt(np.clip(1.0 - 0.45 * (x ** 2 + y ** 2), 0.05, None))
    nose = np.exp(-((x / 0.16) ** 2 + ((y - 0.05) / 0.35) ** 2))
    mean_shape = np.stack([0.8 * x, y, -0.6 * dome - 0.25 * nose], axis=1).ravel()

    skin = np.array([0.86, 0.66, 0.56])
    tex = np.tile(skin, (n_v, 1))
    for ex in (-0.38, 0.38):
        eye = np.exp(-(((x - ex) / 0.14) ** 2 + ((y + 0.25) / 0.07) ** 2))
        tex -= 0.6 * eye[:, None]
    mouth = np.exp(-((x / 0.3) ** 2 + ((y - 0.55) / 0.07) ** 2))
    tex += mouth[:, None] * np.array([0.05, -0.3, -0.3])
    mean_texture = np.clip(tex, 0.0, 1.0).ravel()

    def displacement_basis(n_cols, scale, weights_xyz, region=1.0):
        fields = _smooth_fields(u, v, 3 * n_cols, rng)
        decay = scale / np.sqrt(1.0 + np.arange(n_cols) / 8.0)
        mat = np.zeros((3 * n_v, n_cols))
        for axis in range(3):
            block = fields[:, axis * n_cols:(axis + 1) * n_cols]
            mat[axis::3, :] = weights_xyz[axis] * block * decay * np.asarray(region)[..., None]
        return mat

    b_id = displacement_basis(N_ID, 0.012, (0.5, 0.5, 1.0))
    mouth_region = np.exp(-((x / 0.6) ** 2 + ((y - 0.45) / 0.45) ** 2))
    b_exp = displacement_basis(N_EXP, 0.01, (0.5, 1.0, 0.5), mouth_region)
    b_tex = displacement_basis(N_TEX, 0.01, (1.0, 1.0, 1.0))

    return MorphableBasis(
        mean_shape, mean_texture, b_id, b_exp, b_tex, grid_triangles(rows, cols)
    )
