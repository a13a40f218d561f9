"""Aesthetic prototype database and nearest-identity search.

Prototypes are curated from a CelebA-style attribute list, stored with their
full 239-value parameter vectors, and queried by cosine similarity of the
80-d identity block only.
"""

import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import (
    BadMagicError,
    FileFormatError,
    ParseError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
    ZeroNormError,
)
from .morphable import N_ID, N_PARAMS, ParamVector, load_params
from .validation import check_matrix, check_vector, readonly

logger = logging.getLogger(__name__)

N_ATTRIBUTES = 40

DEFAULT_INCLUDE = ("Attractive", "Young")
DEFAULT_EXCLUDE = (
    "Bags_Under_Eyes",
    "Bald",
    "Big_Nose",
    "Blurry",
    "Chubby",
    "Double_Chin",
    "Eyeglasses",
    "Narrow_Eyes",
    "Wearing_Hat",
)

DB_MAGIC_PREFIX = b"NNSGDB"
DB_VERSION = b"01"
DB_MAGIC = DB_MAGIC_PREFIX + DB_VERSION


# -- attribute table -----------------------------------------------------------

@dataclass(frozen=True)
class AttributeTable:
    image_count: int
    attribute_names: tuple
    filenames: tuple
    flags: np.ndarray  # (n_rows, 40) int8 of +1/-1

    def column(self, name):
        return self.flags[:, self.attribute_names.index(name)]

    def row(self, filename):
        return self.flags[self.filenames.index(filename)]


def parse_attribute_table(data, source=None):
    """Parse a ``list_attr_celeba.txt`` layout.

    Line 1 holds the image count, line 2 the 40 attribute names, and each
    following line a filename and forty ``1``/``-1`` flags. ``data`` may be
    bytes or str.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = data.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) < 2:
        raise ParseError("expected a count line and a header line", path=source)

    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"bad image count {lines[0].strip()!r}", line=1, path=source) from None
    names = tuple(lines[1].split())
    if len(names) != N_ATTRIBUTES:
        raise ParseError(
            f"header has {len(names)} attribute names, expected {N_ATTRIBUTES}",
            line=2, path=source,
        )

    filenames, rows = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        tokens = line.split()
        if not tokens:
            continue
        fname, values = tokens[0], tokens[1:]
        if len(values) != N_ATTRIBUTES:
            raise ParseError(
                f"row {fname!r} has {len(values)} flags, expected {N_ATTRIBUTES}",
                line=lineno, path=source,
            )
        try:
            flags = [int(tok) for tok in values]
        except ValueError:
            raise ParseError(f"non-integer flag in row {fname!r}", line=lineno, path=source) from None
        bad = [f for f in flags if f not in (1, -1)]
        if bad:
            raise ParseError(
                f"flag value {bad[0]} in row {fname!r} is not +1/-1",
                line=lineno, path=source,
            )
        filenames.append(fname)
        rows.append(flags)

    if count != len(rows):
        logger.warning("attribute file declares %d images but lists %d", count, len(rows))
    flags = np.asarray(rows, dtype=np.int8).reshape(-1, N_ATTRIBUTES)
    return AttributeTable(count, names, tuple(filenames), readonly(flags))


def filter_prototypes(table, include=DEFAULT_INCLUDE, exclude=DEFAULT_EXCLUDE):
    """Filenames whose ``include`` flags are all +1 and ``exclude`` flags all -1."""
    include, exclude = list(include), list(exclude)
    unknown = [n for n in include + exclude if n not in table.attribute_names]
    if unknown:
        raise ValidationError(
            f"unknown attribute(s) {unknown}; valid names: {', '.join(table.attribute_names)}"
        )
    keep = np.ones(len(table.filenames), dtype=bool)
    for name in include:
        keep &= table.column(name) == 1
    for name in exclude:
        keep &= table.column(name) == -1
    return [f for f, k in zip(table.filenames, keep) if k]


# -- database ------------------------------------------------------------------

@dataclass(frozen=True)
class PrototypeRecord:
    id: str
    params: ParamVector


class PrototypeDatabase:
    """Immutable prototype collection with precomputed identity norms.

    Parameters are held as a float32 ``(N, 239)`` matrix, the on-disk
    precision, so that save/load round-trips are bit-exact.
    """

    def __init__(self, ids, params):
        self._ids = tuple(ids)
        self._params = readonly(np.asarray(params, dtype=np.float32))
        self._alphas = readonly(self._params[:, :N_ID].astype(np.float64))
        self._norms = readonly(np.linalg.norm(self._alphas, axis=1))

    @property
    def ids(self):
        return self._ids

    @property
    def params(self):
        return self._params

    @property
    def alphas(self):
        return self._alphas

    @property
    def norms(self):
        return self._norms

    def __len__(self):
        return len(self._ids)

    def __getitem__(self, index):
        return PrototypeRecord(self._ids[index], ParamVector.from_array(self._params[index]))

    @property
    def records(self):
        return [self[i] for i in range(len(self))]

    def index_of(self, face_id):
        return self._ids.index(face_id)


def build_database(records):
    records = list(records)
    if not records:
        raise ValidationError("cannot build an empty prototype database")
    seen = set()
    for rec in records:
        if not rec.id:
            raise ValidationError("prototype id must be non-empty")
        if rec.id in seen:
            raise ValidationError(f"duplicate prototype id {rec.id!r}")
        seen.add(rec.id)
        if len(rec.id.encode("utf-8")) > 0xFFFF:
            raise ValidationError(f"prototype id {rec.id[:32]!r}... too long")
    params = np.stack([rec.params.to_array() for rec in records]).astype(np.float32)
    db = PrototypeDatabase([rec.id for rec in records], params)
    zero = np.flatnonzero(db.norms == 0)
    if zero.size:
        raise ZeroNormError(f"prototype {db.ids[zero[0]]!r} has a zero identity vector")
    return db


def ingest_prototypes(params_dir, filenames):
    """Pair selected attribute filenames with ``<stem>.json`` parameter files.

    Returns ``(records, missing)``; missing files are logged and skipped.
    """
    params_dir = Path(params_dir)
    records, missing = [], []
    for fname in filenames:
        path = params_dir / (Path(fname).stem + ".json")
        if not path.is_file():
            logger.warning("no parameter file for %s (looked for %s)", fname, path)
            missing.append(fname)
            continue
        params, _ = load_params(path)
        records.append(PrototypeRecord(fname, params))
    return records, missing


_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_RECORD_FLOATS = N_PARAMS * 4


def save_database(db, path):
    """Write ``magic, u32 count`` then per record ``u16 len, id, 239 x f32``."""
    chunks = [DB_MAGIC, _U32.pack(len(db))]
    for face_id, row in zip(db.ids, db.params):
        raw_id = face_id.encode("utf-8")
        chunks += [_U16.pack(len(raw_id)), raw_id, row.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def load_database(path):
    raw = Path(path).read_bytes()
    header = len(DB_MAGIC) + _U32.size
    if len(raw) < len(DB_MAGIC):
        raise TruncatedFileError(header, len(raw), "database header")
    if raw[:len(DB_MAGIC_PREFIX)] != DB_MAGIC_PREFIX:
        raise BadMagicError(f"bad magic {raw[:8]!r}, expected {DB_MAGIC!r}")
    if raw[len(DB_MAGIC_PREFIX):len(DB_MAGIC)] != DB_VERSION:
        raise VersionMismatchError(
            f"database version {raw[6:8]!r} is not supported (expected {DB_VERSION!r})"
        )
    if len(raw) < header:
        raise TruncatedFileError(header, len(raw), "database header")
    (count,) = _U32.unpack_from(raw, len(DB_MAGIC))

    offset = header
    ids, rows = [], np.empty((count, N_PARAMS), dtype=np.float32)
    for i in range(count):
        if offset + _U16.size > len(raw):
            raise TruncatedFileError(offset + _U16.size, len(raw), f"database (record {i})")
        (id_len,) = _U16.unpack_from(raw, offset)
        end = offset + _U16.size + id_len + _RECORD_FLOATS
        if end > len(raw):
            raise TruncatedFileError(end, len(raw), f"database (record {i})")
        id_start = offset + _U16.size
        try:
            ids.append(raw[id_start:id_start + id_len].decode("utf-8"))
        except UnicodeDecodeError:
            raise FileFormatError(f"record {i}: id is not valid UTF-8") from None
        rows[i] = np.frombuffer(raw, dtype="<f4", count=N_PARAMS, offset=id_start + id_len)
        offset = end
    if offset != len(raw):
        raise FileFormatError(f"{len(raw) - offset} trailing bytes after {count} records")
    return PrototypeDatabase(ids, rows)


# -- search --------------------------------------------------------------------

def cosine_similarity(a, b):
    a = check_vector(a, name="a")
    b = check_vector(b, a.shape[0], "b")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNormError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _scores(alphas, norms, query):
    qn = np.linalg.norm(query)
    if qn == 0:
        raise ZeroNormError("query identity vector has zero norm")
    return np.clip((alphas @ query) / (norms * qn), -1.0, 1.0)


# cosines equal to this many decimals rank as ties; absorbs ulp noise
# between mathematically equal similarities (e.g. rescaled copies)
RANK_DECIMALS = 12


def _top_k(scores, k):
    # stable sort on the negated score: equal scores keep ascending index order
    order = np.argsort(-np.round(scores, RANK_DECIMALS), kind="stable")[:k]
    return order, scores[order]


def resolve_threads(n_jobs=None):
    """Worker count from ``n_jobs`` or the ``NNSG_THREADS`` environment cap."""
    if n_jobs is None:
        env = os.environ.get("NNSG_THREADS")
        if env:
            try:
                n_jobs = int(env)
            except ValueError:
                raise ValidationError(f"NNSG_THREADS must be an integer, got {env!r}") from None
        else:
            n_jobs = 1
    if n_jobs < 1:
        n_jobs = os.cpu_count() or 1
    return n_jobs


def nearest(db, alpha0, k=1):
    """Top-``k`` prototypes by descending cosine similarity to ``alpha0``.

    Returns a list of ``(index, score)``; ties go to the lower index, so
    ``result[0]`` is the argmax over the whole database.
    """
    if len(db) == 0:
        raise ValidationError("prototype database is empty")
    if not 1 <= k <= len(db):
        raise ValidationError(f"k must lie in [1, {len(db)}], got {k}")
    alpha0 = check_vector(alpha0, N_ID, "alpha0")
    idx, scores = _top_k(_scores(db.alphas, db.norms, alpha0), k)
    return [(int(i), float(s)) for i, s in zip(idx, scores)]


def nearest_batch(db, queries, k=1, n_jobs=None):
    """``nearest`` for each row of ``queries``, spread over worker threads.

    Every query runs the same scan, so results do not depend on ``n_jobs``.
    """
    queries = check_matrix(queries, N_ID, "queries")
    n_jobs = resolve_threads(n_jobs)
    if n_jobs == 1 or len(queries) < 2:
        return [nearest(db, q, k) for q in queries]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(lambda q: nearest(db, q, k), queries))


class NearestPrototypeSearch(BaseEstimator):
    """Cosine nearest-neighbour search over identity vectors.

    Parameters
    ----------
    n_neighbors : int, default=1
        Neighbours returned by :meth:`kneighbors` when not overridden.
    n_jobs : int or None
        Worker threads for batched queries; ``None`` reads ``NNSG_THREADS``.

    Attributes
    ----------
    database_ : PrototypeDatabase
    n_samples_fit_ : int
    """

    def __init__(self, n_neighbors=1, n_jobs=None):
        self.n_neighbors = n_neighbors
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        """Index a :class:`PrototypeDatabase` or an ``(N, 80)`` identity matrix.

        ``y`` optionally supplies ids for matrix input.
        """
        if isinstance(X, PrototypeDatabase):
            db = X
        else:
            X = check_matrix(X, N_ID)
            ids = [str(i) for i in range(len(X))] if y is None else [str(v) for v in y]
            params = np.zeros((len(X), N_PARAMS))
            params[:, :N_ID] = X
            db = build_database(
                PrototypeRecord(i, ParamVector.from_array(p)) for i, p in zip(ids, params)
            )
        if len(db) == 0:
            raise ValidationError("prototype database is empty")
        self.database_ = db
        self.n_samples_fit_ = len(db)
        return self

    def _check_fitted(self):
        if not hasattr(self, "database_"):
            raise NotFittedError("NearestPrototypeSearch is not fitted; call fit first")

    def kneighbors(self, X, n_neighbors=None, return_similarity=True):
        """Indices (and similarities) of the nearest prototypes, shape ``(n, k)``."""
        self._check_fitted()
        k = self.n_neighbors if n_neighbors is None else n_neighbors
        results = nearest_batch(self.database_, X, k, self.n_jobs)
        idx = np.array([[i for i, _ in r] for r in results], dtype=np.int64)
        if not return_similarity:
            return idx
        sim = np.array([[s for _, s in r] for r in results])
        return sim, idx

    def predict(self, X):
        """Index of the single most similar prototype per query."""
        return self.kneighbors(X, n_neighbors=1, return_similarity=False)[:, 0]

    def predict_ids(self, X):
        return [self.database_.ids[i] for i in self.predict(X)]
