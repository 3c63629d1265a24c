"""Synthetic cortical-like surface data, normalisation, splits and the SSRF file format.

The generator stands in for real cortical metrics. Each subject gets a scalar
phenotype ``y`` in [0, 1] and C channel maps over an icosphere. Every channel
is a combination of a fixed smooth basis (polynomials in x, y, z restricted to
the sphere, orthonormalised). The mixing coefficients move smoothly with the
phenotype and with a few subject-specific nuisance factors, so that (a) maps
share structure across subjects that a reconstruction task can learn and
(b) the phenotype is recoverable from the map shape.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .geodesy import icosphere

SSRF_MAGIC = b"SSRF"
SSRF_VERSION = 1
SPLITS = {"train": 0, "val": 1, "test": 2}
SPLIT_NAMES = {v: k for k, v in SPLITS.items()}
CHANNEL_NAMES = ("sulcal_depth", "curvature", "thickness", "myelin")


class DatasetFormatError(ValueError):
    """Raised for malformed SSRF files."""


@dataclass
class SurfaceSubject:
    id: str
    X: np.ndarray  # (V, C) float32
    y: float
    split: int = 0


@dataclass
class SurfaceDataset:
    data_level: int
    patch_level: int
    channels: int
    subjects: list[SurfaceSubject]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_vertices(self) -> int:
        return 10 * 4**self.data_level + 2

    def select(self, split: str | int | None = None) -> list[SurfaceSubject]:
        if split is None:
            return list(self.subjects)
        code = SPLITS[split] if isinstance(split, str) else split
        return [s for s in self.subjects if s.split == code]

    def subset(self, subjects: list[SurfaceSubject]) -> "SurfaceDataset":
        return replace(self, subjects=list(subjects))

    def arrays(self, split: str | int | None = None) -> tuple[np.ndarray, np.ndarray]:
        subs = self.select(split)
        if not subs:
            return np.zeros((0, self.n_vertices, self.channels), np.float32), np.zeros(0)
        return np.stack([s.X for s in subs]), np.array([s.y for s in subs], dtype=np.float64)

    def split_counts(self) -> dict[str, int]:
        return {name: sum(s.split == code for s in self.subjects) for name, code in SPLITS.items()}


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


# --------------------------------------------------------------------------
# generator


def smooth_basis(vertices: np.ndarray, degree: int = 3) -> np.ndarray:
    """Orthonormal (over vertices) basis of polynomials up to ``degree`` on the sphere."""
    cols = [np.ones(len(vertices))]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(3), d):
            cols.append(np.prod(vertices[:, combo], axis=1))
    A = np.stack(cols, axis=1)
    q, r = np.linalg.qr(A)
    # x^2+y^2+z^2 = 1 makes some columns dependent; keep the independent directions
    keep = np.abs(np.diag(r)) > 1e-8 * np.abs(r).max()
    q = q[:, keep] * np.sign(np.diag(r)[keep])
    return q * math.sqrt(len(vertices))


def generate(
    n: int,
    data_level: int = 4,
    channels: int = 4,
    seed: int = 0,
    snr: float = 5.0,
    patch_level: int | None = None,
    n_factors: int = 3,
    nuisance: float = 0.6,
) -> SurfaceDataset:
    """Draw ``n`` synthetic subjects; ``snr=inf`` gives noise-free maps."""
    if n < 10:
        raise ValueError(f"need at least 10 subjects, got {n}")
    if data_level < 2:
        raise ValueError(f"data_level must be >= 2, got {data_level}")
    if not snr > 0:
        raise ValueError(f"snr must be > 0, got {snr}")
    if patch_level is None:
        patch_level = max(0, data_level - 3)

    verts = icosphere(data_level).vertices
    basis = smooth_basis(verts)  # (V, K)
    K = basis.shape[1]
    rng = np.random.default_rng(seed)

    # fixed structure shared by all subjects
    base = rng.normal(0.0, 1.0, (channels, K))
    toward = rng.normal(0.0, 1.0, (channels, K))
    bend = rng.normal(0.0, 0.5, (channels, K))
    loadings = rng.normal(0.0, 1.0, (n_factors, channels, K))
    offset = rng.normal(0.0, 0.5, channels)
    slope = rng.choice([-1.0, 1.0], channels) * rng.uniform(1.0, 2.0, channels)

    subjects = []
    for i in range(n):
        y = float(rng.uniform(0.0, 1.0))
        z = rng.normal(0.0, 1.0, n_factors)
        coef = base + toward * (2.0 * y - 1.0) + bend * (4.0 * (y - 0.5) ** 2 - 1.0 / 3.0)
        coef = coef + nuisance * np.tensordot(z, loadings, axes=1)
        signal = coef @ basis.T + (offset + slope * y)[:, None]  # (C, V)
        if math.isinf(snr):
            X = signal
        else:
            sd = signal.std(axis=1, keepdims=True)
            X = signal + rng.normal(0.0, 1.0, signal.shape) * (sd / snr)
        subjects.append(SurfaceSubject(f"sub-{i:05d}", X.T.astype(np.float32), y, 0))

    prov = {
        "generator": "smae.synthcortex.generate",
        "seed": int(seed),
        "snr": None if math.isinf(snr) else float(snr),
        "nFactors": int(n_factors),
        "nuisance": float(nuisance),
        "basisDegree": 3,
        "channelNames": list(CHANNEL_NAMES[:channels]) if channels <= len(CHANNEL_NAMES) else None,
    }
    return SurfaceDataset(data_level, patch_level, channels, subjects, prov)


# --------------------------------------------------------------------------
# normalisation


def normalize_map(X: np.ndarray, clip: float = 3.0) -> np.ndarray:
    """Per-channel z-score over vertices, then clip to [-clip, clip].

    Channels with std < 1e-8 become all zeros.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0, keepdims=True)
    std = X.std(axis=0, keepdims=True)
    flat = std < 1e-8
    Z = (X - mean) / np.where(flat, 1.0, std)
    Z[:, flat[0]] = 0.0
    return np.clip(Z, -clip, clip)


def normalize(subject: SurfaceSubject, clip: float = 3.0) -> SurfaceSubject:
    return replace(subject, X=normalize_map(subject.X, clip).astype(np.float32))


# --------------------------------------------------------------------------
# stratified splitting


def phenotype_bins(y: np.ndarray, bins: int = 10) -> np.ndarray:
    """Equal-width bin index in [0, bins) over the range of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    lo, hi = float(y.min()), float(y.max())
    if hi <= lo:
        return np.zeros(len(y), dtype=np.int64)
    b = np.floor((y - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(b, 0, bins - 1)


def split(dataset: SurfaceDataset, ratios=(0.7, 0.15, 0.15), bins: int = 10, seed: int = 0) -> SurfaceDataset:
    """Assign train/val/test labels, stratified over phenotype bins.

    Subjects are ordered by bin (random order within a bin) and dealt out to
    whichever split is furthest below its running quota, so split totals are
    exact and every bin is spread proportionally.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios.tolist()}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    y = np.array([s.y for s in dataset.subjects])
    b = phenotype_bins(y, bins)
    order = np.lexsort((rng.permutation(n), b))
    quota = np.array([round_half_away(r * n) for r in ratios[:2]])
    quota = np.append(quota, n - quota.sum())
    assigned = np.zeros(3)
    labels = np.empty(n, dtype=np.int64)
    for pos, i in enumerate(order):
        deficit = quota * (pos + 1) / n - assigned
        deficit[assigned >= quota] = -np.inf
        k = int(np.argmax(deficit))
        labels[i] = k
        assigned[k] += 1
    subs = [replace(s, split=int(labels[i])) for i, s in enumerate(dataset.subjects)]
    return dataset.subset(subs)


# --------------------------------------------------------------------------
# SSRF format


def write_dataset(ds: SurfaceDataset, path: str | Path) -> None:
    header = {
        "dataLevel": ds.data_level,
        "patchLevel": ds.patch_level,
        "channels": ds.channels,
        "subjectCount": len(ds.subjects),
        "provenance": ds.provenance,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(SSRF_MAGIC)
    buf.write(struct.pack("<IQ", SSRF_VERSION, len(blob)))
    buf.write(blob)
    V, C = ds.n_vertices, ds.channels
    for s in ds.subjects:
        if s.X.shape != (V, C):
            raise ValueError(f"{s.id}: map shape {s.X.shape} != ({V}, {C})")
        sid = s.id.encode("utf-8")
        buf.write(struct.pack("<I", len(sid)))
        buf.write(sid)
        buf.write(struct.pack("<dB", float(s.y), int(s.split)))
        buf.write(np.ascontiguousarray(s.X, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_dataset(path: str | Path) -> SurfaceDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DatasetFormatError(f"{path}: truncated header")
    if raw[:4] != SSRF_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:4]!r}, expected {SSRF_MAGIC!r}")
    version, blob_len = struct.unpack_from("<IQ", raw, 4)
    if version != SSRF_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    off = 16
    if off + blob_len > len(raw):
        raise DatasetFormatError(f"{path}: truncated header blob")
    try:
        header = json.loads(raw[off : off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: unreadable header: {exc}") from None
    off += blob_len
    level, C, count = int(header["dataLevel"]), int(header["channels"]), int(header["subjectCount"])
    V = 10 * 4**level + 2
    nbytes = V * C * 4
    subjects = []
    while off < len(raw):
        if len(subjects) == count:
            raise DatasetFormatError(f"{path}: payload holds more than the {count} subjects in the header")
        try:
            (n_id,) = struct.unpack_from("<I", raw, off)
            off += 4
            sid = raw[off : off + n_id].decode("utf-8")
            off += n_id
            y, sp = struct.unpack_from("<dB", raw, off)
            off += 9
        except (struct.error, UnicodeDecodeError):
            raise DatasetFormatError(f"{path}: truncated subject record {len(subjects)}") from None
        if off + nbytes > len(raw):
            raise DatasetFormatError(f"{path}: truncated map for subject {sid!r}")
        X = np.frombuffer(raw, dtype="<f4", count=V * C, offset=off).reshape(V, C).astype(np.float32)
        off += nbytes
        if sp not in SPLIT_NAMES:
            raise DatasetFormatError(f"{path}: subject {sid!r} has invalid split code {sp}")
        subjects.append(SurfaceSubject(sid, X, float(y), int(sp)))
    if len(subjects) != count:
        raise DatasetFormatError(f"{path}: header says {count} subjects, payload has {len(subjects)}")
    return SurfaceDataset(level, int(header["patchLevel"]), C, subjects, header.get("provenance", {}))
