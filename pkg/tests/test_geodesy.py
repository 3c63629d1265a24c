import numpy as np
import pytest

from smae import geodesy as G


@pytest.fixture(scope="module")
def h33():
    return G.build_hierarchy(3, 3)


@pytest.fixture(scope="module")
def table33(h33):
    return G.patch_table(h33)


def test_icosahedron_basics():
    m = G.icosahedron()
    assert m.n_vertices == 12 and m.n_faces == 20
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-15)
    edges = m.edges()
    assert len(edges) == 30
    assert G.check_mesh(m) == []


def test_icosahedron_faces_point_outward():
    m = G.icosahedron()
    a, b, c = (m.vertices[m.faces[:, i]] for i in range(3))
    normal = np.cross(b - a, c - a)
    assert np.all(np.einsum("ij,ij->i", normal, a + b + c) > 0)


@pytest.mark.parametrize("level", range(0, 7))
def test_vertex_and_face_counts(level):
    m = G.icosphere(level)
    assert (m.n_vertices, m.n_faces) == (10 * 4**level + 2, 20 * 4**level)


def test_ico6_counts():
    m = G.subdivide(G.icosphere(5))
    assert m.n_vertices == 40962
    assert m.n_faces == 81920


def test_subdivide_keeps_parent_indices_and_sphere():
    m2 = G.icosphere(2)
    m3 = G.subdivide(m2)
    np.testing.assert_array_equal(m3.vertices[: m2.n_vertices], m2.vertices)
    assert G.check_mesh(m3) == []


def test_subdivision_is_deterministic():
    a, b = G.icosphere(3), G.icosphere(3)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.faces, b.faces)


def _brute_descendants(h, face):
    """Walk the child table one face at a time."""
    cur = [face]
    for children in h.child_faces:
        cur = [int(c) for f in cur for c in children[f]]
    return cur


def test_hierarchy_descendant_counts():
    h = G.build_hierarchy(3, 3)
    assert [m.level for m in h.meshes] == [3, 4, 5, 6]
    desc = h.descendants()
    assert desc.shape == (1280, 64)


def test_hierarchy_level1_matches_brute_force():
    h = G.build_hierarchy(1, 3)
    desc = h.descendants()
    assert desc.shape[0] == 80
    for f in range(80):
        brute = _brute_descendants(h, f)
        assert len(brute) == 64
        assert sorted(brute) == sorted(desc[f].tolist())
    assert h.meshes[-1].n_vertices == 2562


def test_hierarchy_level0():
    h = G.build_hierarchy(0, 3)
    assert G.patch_table(h).n_patches == 20
    assert h.meshes[-1].level == 3


def test_depth_zero_rejected():
    with pytest.raises(ValueError):
        G.build_hierarchy(3, 0)


def test_patch_table_shape(table33):
    assert table33.patches.shape == (1280, 45)
    assert table33.patches.size == 57600


def test_patch_table_union_brute_force(h33, table33):
    faces = h33.meshes[-1].faces
    covered = set()
    for f in range(h33.meshes[-1].n_faces):
        covered.update(faces[f].tolist())
    assert len(covered) == 40962
    assert set(np.unique(table33.patches).tolist()) == covered


def test_rows_are_distinct_and_partition_faces(h33, table33):
    assert all(len(set(r.tolist())) == 45 for r in table33.patches)
    faces = h33.meshes[-1].faces
    desc = h33.descendants()
    for i in range(0, 1280, 37):
        row = set(table33.patches[i].tolist())
        assert set(faces[desc[i]].ravel().tolist()) == row


def test_multiplicity(table33):
    m = table33.multiplicity
    assert m.min() >= 1
    assert m.sum() == 1280 * 45
    # interior of the barycentric grid (i in 1..7, j in 1..i-1) is private to one patch
    n = 8
    rows, cols = np.tril_indices(n + 1)
    on_edge = (cols == 0) | (cols == rows) | (rows == n)
    assert np.all(m[table33.patches[:, ~on_edge]] == 1)
    assert np.all(m[table33.patches[:, on_edge]] > 1)


def test_general_depth_patch_sizes():
    for depth, size in [(1, 6), (2, 15), (3, 45)]:
        t = G.patch_table(G.build_hierarchy(0, depth))
        assert t.patch_size == size == G.patch_size_for_depth(depth)


def _geometric_grid(a, b, c, depth):
    """Recursive midpoint subdivision of one spherical triangle, coordinates only."""
    if depth == 0:
        return {(0, 0): a, (1, 0): b, (1, 1): c}

    def mid(p, q):
        v = p + q
        return v / np.linalg.norm(v)

    ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
    half = 2 ** (depth - 1)
    out = {}
    for (i, j), v in _geometric_grid(a, ab, ca, depth - 1).items():
        out[(i, j)] = v
    for (i, j), v in _geometric_grid(ab, b, bc, depth - 1).items():
        out[(half + i, j)] = v
    for (i, j), v in _geometric_grid(ca, bc, c, depth - 1).items():
        out[(half + i, half + j)] = v
    for (i, j), v in _geometric_grid(ab, bc, ca, depth - 1).items():
        out[(half + i - j, i)] = v
    return out


def test_barycentric_row_major_order_matches_geometry():
    h = G.build_hierarchy(1, 3)
    t = G.patch_table(h)
    coarse, fine = h.meshes[0], h.meshes[-1]
    rows, cols = np.tril_indices(9)
    for f in range(0, 80, 7):
        a, b, c = coarse.vertices[coarse.faces[f]]
        grid = _geometric_grid(a, b, c, 3)
        pts = np.stack([grid[(i, j)] for i, j in zip(rows, cols)])
        d = np.linalg.norm(fine.vertices[None, :, :] - pts[:, None, :], axis=2)
        np.testing.assert_array_equal(d.argmin(axis=1), t.patches[f])
        assert d.min(axis=1).max() < 1e-12


def test_patch_table_deterministic(table33):
    again = G.patch_table(G.build_hierarchy(3, 3))
    np.testing.assert_array_equal(again.patches, table33.patches)
    np.testing.assert_array_equal(again.multiplicity, table33.multiplicity)


def test_check_hierarchy_clean(h33, table33):
    assert G.check_hierarchy(h33, table33) == []


def test_mesh_roundtrip(tmp_path):
    m = G.icosphere(2)
    p = tmp_path / "ico2.smesh"
    G.write_mesh(m, p)
    back = G.read_mesh(p)
    assert back.level == 2
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_mesh_bad_magic(tmp_path):
    p = tmp_path / "bad.smesh"
    G.write_mesh(G.icosphere(1), p)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(G.MeshFormatError, match="magic"):
        G.read_mesh(p)


def test_mesh_truncated(tmp_path):
    p = tmp_path / "short.smesh"
    G.write_mesh(G.icosphere(1), p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(G.MeshFormatError, match="truncated"):
        G.read_mesh(p)
