"""Icosphere hierarchies and the face-to-patch vertex mapping.

A data-level icosphere (e.g. ico6) is split into triangular patches by the
faces of a coarser icosphere (e.g. ico3). Patch membership is read off the
subdivision hierarchy itself: every fine face descends from exactly one
coarse face, so no nearest-neighbour search is involved.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MESH_MAGIC = b"SMSH"
MESH_VERSION = 1
_MESH_HEADER = struct.Struct("<4sIIQQ")


class MeshFormatError(ValueError):
    """Raised for malformed SMESH files."""


@dataclass(frozen=True)
class IcoMesh:
    level: int
    vertices: np.ndarray  # (V, 3) float64, unit norm
    faces: np.ndarray  # (F, 3) int64

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs, lexicographic order."""
        return np.unique(_face_edges(self.faces), axis=0)


@dataclass(frozen=True)
class IcoHierarchy:
    meshes: tuple[IcoMesh, ...]
    # child_faces[j][f] -> the 4 faces of meshes[j + 1] spawned by face f of meshes[j]
    child_faces: tuple[np.ndarray, ...]

    @property
    def patch_level(self) -> int:
        return self.meshes[0].level

    @property
    def data_level(self) -> int:
        return self.meshes[-1].level

    @property
    def depth(self) -> int:
        return len(self.meshes) - 1

    def descendants(self, faces: np.ndarray | None = None) -> np.ndarray:
        """Data-level faces descending from each coarse face, shape (N, 4**depth)."""
        cur = np.arange(self.meshes[0].n_faces) if faces is None else np.asarray(faces)
        cur = cur.reshape(-1, 1)
        for children in self.child_faces:
            cur = children[cur].reshape(cur.shape[0], -1)
        return cur


@dataclass(frozen=True)
class PatchTable:
    patch_level: int
    data_level: int
    patches: np.ndarray  # (N, patch_size) int64
    multiplicity: np.ndarray = field(repr=False)  # (V_data,) int64

    @property
    def n_patches(self) -> int:
        return int(self.patches.shape[0])

    @property
    def patch_size(self) -> int:
        return int(self.patches.shape[1])

    @property
    def n_vertices(self) -> int:
        return int(self.multiplicity.shape[0])


def expected_counts(level: int) -> tuple[int, int]:
    """(|V|, |F|) of the level-k icosphere."""
    return 10 * 4**level + 2, 20 * 4**level


def patch_size_for_depth(depth: int) -> int:
    n = 2**depth
    return (n + 1) * (n + 2) // 2


def icosahedron() -> IcoMesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    # counter-clockwise seen from outside
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return IcoMesh(0, verts, faces)


def _face_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.sort(e, axis=1)


def _subdivide(mesh: IcoMesh) -> tuple[IcoMesh, np.ndarray]:
    faces = mesh.faces
    nf = faces.shape[0]
    edges, inverse = np.unique(_face_edges(faces), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mid = mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    verts = np.concatenate([mesh.vertices, mid])

    nv = mesh.n_vertices
    ab = nv + inverse[:nf]
    bc = nv + inverse[nf : 2 * nf]
    ca = nv + inverse[2 * nf :]
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    # children ordered: apex a, corner b, corner c, centre
    children = np.stack(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ],
        axis=1,
    )
    new_faces = children.reshape(-1, 3)
    child_index = np.arange(4 * nf, dtype=np.int64).reshape(nf, 4)
    return IcoMesh(mesh.level + 1, verts, new_faces), child_index


def subdivide(mesh: IcoMesh) -> IcoMesh:
    """Split every face into four at its (re-normalised) edge midpoints.

    Parent vertices keep their indices; midpoints are appended in sorted-edge
    order.
    """
    return _subdivide(mesh)[0]


def icosphere(level: int) -> IcoMesh:
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    mesh = icosahedron()
    for _ in range(level):
        mesh = subdivide(mesh)
    return mesh


def build_hierarchy(patch_level: int, depth: int = 3) -> IcoHierarchy:
    if patch_level < 0:
        raise ValueError(f"patch_level must be >= 0, got {patch_level}")
    if depth < 1:
        raise ValueError(f"depth must be >= 1 (a patch needs interior vertices), got {depth}")
    meshes = [icosphere(patch_level)]
    children = []
    for _ in range(depth):
        nxt, child = _subdivide(meshes[-1])
        meshes.append(nxt)
        children.append(child)
    return IcoHierarchy(tuple(meshes), tuple(children))


def _corner_grid(h: IcoHierarchy, level: int, faces: np.ndarray, remaining: int) -> np.ndarray:
    """Triangular vertex grid of each face, shape (len(faces), n+1, n+1), n = 2**remaining.

    Entry [i, j] (j <= i) is the vertex at row i from the apex (face corner 0),
    column j towards corner 2; the unused upper triangle holds -1.
    """
    if remaining == 0:
        tri = h.meshes[level].faces[faces]
        g = np.full((len(faces), 2, 2), -1, dtype=np.int64)
        g[:, 0, 0] = tri[:, 0]
        g[:, 1, 0] = tri[:, 1]
        g[:, 1, 1] = tri[:, 2]
        return g
    kids = h.child_faces[level][faces]
    half = 2 ** (remaining - 1)
    n = 2 * half
    g = np.full((len(faces), n + 1, n + 1), -1, dtype=np.int64)
    top = _corner_grid(h, level + 1, kids[:, 0], remaining - 1)
    left = _corner_grid(h, level + 1, kids[:, 1], remaining - 1)
    right = _corner_grid(h, level + 1, kids[:, 2], remaining - 1)
    g[:, : half + 1, : half + 1] = top
    # shared rows are written twice with identical indices; -1 must not overwrite
    sub = g[:, half:, : half + 1]
    g[:, half:, : half + 1] = np.where(left >= 0, left, sub)
    sub = g[:, half:, half:]
    g[:, half:, half:] = np.where(right >= 0, right, sub)
    # the inverted centre child (ab, bc, ca) owns interior vertices once depth >= 3
    centre = _corner_grid(h, level + 1, kids[:, 3], remaining - 1)
    i, j = np.tril_indices(half + 1)
    g[:, half + i - j, i] = centre[:, i, j]
    return g


def patch_table(h: IcoHierarchy) -> PatchTable:
    """Per coarse face, its data-level vertices in barycentric row-major order."""
    n0 = h.meshes[0].n_faces
    grid = _corner_grid(h, 0, np.arange(n0), h.depth)
    n = 2**h.depth
    rows, cols = np.tril_indices(n + 1)
    patches = grid[:, rows, cols]
    if (patches < 0).any():
        raise AssertionError("incomplete patch grid")
    mult = np.bincount(patches.ravel(), minlength=h.meshes[-1].n_vertices).astype(np.int64)
    return PatchTable(h.patch_level, h.data_level, patches, mult)


@functools.lru_cache(maxsize=8)
def default_patch_table(patch_level: int, data_level: int) -> PatchTable:
    return patch_table(build_hierarchy(patch_level, data_level - patch_level))


def check_mesh(mesh: IcoMesh) -> list[str]:
    """Return descriptions of violated icosphere invariants (empty when valid)."""
    problems = []
    nv, nf = expected_counts(mesh.level)
    if mesh.n_vertices != nv:
        problems.append(f"level {mesh.level}: {mesh.n_vertices} vertices, expected {nv}")
    if mesh.n_faces != nf:
        problems.append(f"level {mesh.level}: {mesh.n_faces} faces, expected {nf}")
    norms = np.linalg.norm(mesh.vertices, axis=1)
    if np.abs(norms - 1.0).max(initial=0.0) > 1e-9:
        problems.append(f"level {mesh.level}: vertex off unit sphere")
    if mesh.faces.min() < 0 or mesh.faces.max() >= mesh.n_vertices:
        problems.append(f"level {mesh.level}: face index out of range")
    _, counts = np.unique(_face_edges(mesh.faces), axis=0, return_counts=True)
    if not np.all(counts == 2):
        problems.append(f"level {mesh.level}: edge not shared by exactly two faces")
    return problems


def check_hierarchy(h: IcoHierarchy, table: PatchTable | None = None) -> list[str]:
    problems = []
    for mesh in h.meshes:
        problems += check_mesh(mesh)
    for lo, hi in zip(h.meshes[:-1], h.meshes[1:]):
        if not np.array_equal(hi.vertices[: lo.n_vertices], lo.vertices):
            problems.append(f"level {hi.level}: parent vertices not a prefix")
    desc = h.descendants()
    if desc.shape[1] != 4**h.depth or len(np.unique(desc)) != h.meshes[-1].n_faces:
        problems.append("descendant faces do not partition the data mesh")
    if table is not None:
        size = patch_size_for_depth(h.depth)
        if table.patches.shape != (h.meshes[0].n_faces, size):
            problems.append(f"patch table shape {table.patches.shape}")
        distinct = np.array([len(np.unique(r)) for r in table.patches])
        if not np.all(distinct == size):
            problems.append("patch with repeated vertices")
        if (table.multiplicity < 1).any():
            problems.append("data vertex not covered by any patch")
        if table.multiplicity.sum() != table.patches.size:
            problems.append("multiplicity does not sum to slot count")
    return problems


def write_mesh(mesh: IcoMesh, path: str | Path) -> None:
    header = _MESH_HEADER.pack(MESH_MAGIC, MESH_VERSION, mesh.level, mesh.n_vertices, mesh.n_faces)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(mesh.faces, dtype="<u4").tobytes())


def read_mesh(path: str | Path) -> IcoMesh:
    raw = Path(path).read_bytes()
    if len(raw) < _MESH_HEADER.size:
        raise MeshFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, level, nv, nf = _MESH_HEADER.unpack_from(raw)
    if magic != MESH_MAGIC:
        raise MeshFormatError(f"{path}: bad magic {magic!r}, expected {MESH_MAGIC!r}")
    if version != MESH_VERSION:
        raise MeshFormatError(f"{path}: unsupported version {version}")
    need = _MESH_HEADER.size + nv * 24 + nf * 12
    if len(raw) != need:
        raise MeshFormatError(f"{path}: truncated payload ({len(raw)} of {need} bytes)")
    off = _MESH_HEADER.size
    verts = np.frombuffer(raw, dtype="<f8", count=nv * 3, offset=off).reshape(nv, 3)
    faces = np.frombuffer(raw, dtype="<u4", count=nf * 3, offset=off + nv * 24).reshape(nf, 3)
    return IcoMesh(int(level), verts.astype(np.float64), faces.astype(np.int64))
