import meshio
import numpy as np
import pytest

from mesh_io import (
    bounding_box_center, bounding_box_diagonal, build_mesh, connectivity_hash,
    inverted_count, load_mesh, mesh_hash, save_mesh, signed_volumes, total_volume,
    vertex_adjacency, write_surface_obj,
)
from recon_errors import MeshError

UNIT_VERTS = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def two_tets():
    verts = np.vstack([UNIT_VERTS, [[1.0, 1.0, 1.0]]])
    return build_mesh(verts, [[0, 1, 2, 3], [1, 2, 3, 4]])


class TestGeometry:
    def test_unit_tet_volume(self, unit_tet):
        assert total_volume(unit_tet) == pytest.approx(1.0 / 6.0, abs=1e-15)

    def test_negative_orientation_is_canonicalized(self):
        mesh = build_mesh(UNIT_VERTS, [[0, 2, 1, 3]])
        assert signed_volumes(mesh)[0] > 0
        assert total_volume(mesh) == pytest.approx(1.0 / 6.0)

    def test_inverted_count_after_reflection(self, unit_tet):
        flipped = unit_tet.with_vertices(unit_tet.vertices * np.array([1.0, 1.0, -1.0]))
        assert inverted_count(flipped) == 1
        assert inverted_count(unit_tet) == 0

    def test_bounding_box(self, unit_tet):
        assert bounding_box_diagonal(unit_tet) == pytest.approx(np.sqrt(3.0))
        assert np.allclose(bounding_box_center(unit_tet), [0.5, 0.5, 0.5])

    def test_boundary_faces_and_edges(self, unit_tet):
        assert len(unit_tet.boundary_faces) == 4
        assert len(unit_tet.edges) == 6
        mesh = two_tets()
        assert len(mesh.boundary_faces) == 6
        assert len(mesh.edges) == 9

    def test_boundary_faces_point_outward(self, unit_tet):
        centroid = unit_tet.vertices.mean(axis=0)
        for a, b, c in unit_tet.boundary_faces:
            p = unit_tet.vertices
            normal = np.cross(p[b] - p[a], p[c] - p[a])
            assert normal @ (p[a] - centroid) > 0

    def test_adjacency_is_symmetric(self, unit_tet):
        adj = vertex_adjacency(unit_tet).toarray()
        assert np.array_equal(adj, adj.T)
        assert np.array_equal(adj.sum(axis=1), [3, 3, 3, 3])

    def test_arrays_are_read_only(self, unit_tet):
        with pytest.raises(ValueError):
            unit_tet.vertices[0, 0] = 5.0


class TestHashes:
    def test_translation_keeps_connectivity_hash(self, unit_tet):
        moved = unit_tet.with_vertices(unit_tet.vertices + 1.0)
        assert connectivity_hash(moved) == connectivity_hash(unit_tet)
        assert mesh_hash(moved) != mesh_hash(unit_tet)


class TestValidation:
    def test_coplanar_tet_rejected(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        with pytest.raises(MeshError, match="Degenerate"):
            build_mesh(verts, [[0, 1, 2, 3]])

    def test_index_out_of_range(self):
        with pytest.raises(MeshError):
            build_mesh(UNIT_VERTS, [[0, 1, 2, 4]])

    def test_too_few_vertices(self):
        with pytest.raises(MeshError):
            build_mesh(UNIT_VERTS[:3], np.zeros((0, 4), dtype=int))

    def test_disconnected_mesh_rejected(self):
        verts = np.vstack([UNIT_VERTS, UNIT_VERTS + 5.0])
        with pytest.raises(MeshError, match="connected components"):
            build_mesh(verts, [[0, 1, 2, 3], [4, 5, 6, 7]])

    def test_non_manifold_face_rejected(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                          [0, 0, 1], [0.2, 0.2, 2], [0.1, 0.1, -1]], dtype=float)
        with pytest.raises(MeshError, match="Non-manifold"):
            build_mesh(verts, [[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]])


class TestFileIO:
    def test_round_trip(self, tmp_path, small_bent):
        save_mesh(small_bent, tmp_path / 'axon.node')
        loaded = load_mesh(tmp_path / 'axon.node')
        assert np.allclose(loaded.vertices, small_bent.vertices, rtol=0, atol=1e-12)
        assert np.array_equal(loaded.tets, small_bent.tets)
        assert loaded.name == 'axon'

    def test_zero_based_with_attributes(self, tmp_path):
        (tmp_path / 'm.node').write_text(
            "# comment line\n4 3 1 1\n"
            "0 0 0 0 7.0 1\n1 1 0 0 7.0 1\n2 0 1 0 7.0 1\n3 0 0 1 7.0 1\n"
        )
        (tmp_path / 'm.ele').write_text("1 4 0\n0 0 1 2 3\n")
        mesh = load_mesh(tmp_path / 'm.node')
        assert mesh.n_vertices == 4
        assert total_volume(mesh) == pytest.approx(1.0 / 6.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MeshError, match="not found"):
            load_mesh(tmp_path / 'absent.node')

    def test_malformed_header(self, tmp_path):
        (tmp_path / 'm.node').write_text("four 3 0 0\n")
        with pytest.raises(MeshError, match="header"):
            load_mesh(tmp_path / 'm.node')

    def test_node_count_mismatch(self, tmp_path):
        (tmp_path / 'm.node').write_text("5 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n")
        (tmp_path / 'm.ele').write_text("1 4 0\n1 1 2 3 4\n")
        with pytest.raises(MeshError, match="declares 5 nodes"):
            load_mesh(tmp_path / 'm.node')

    def test_element_index_out_of_range(self, tmp_path):
        (tmp_path / 'm.node').write_text("4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n")
        (tmp_path / 'm.ele').write_text("1 4 0\n1 1 2 3 9\n")
        with pytest.raises(MeshError):
            load_mesh(tmp_path / 'm.node')

    def test_surface_obj(self, tmp_path, unit_tet):
        path = tmp_path / 'tet.obj'
        write_surface_obj(unit_tet, path)
        lines = path.read_text().splitlines()
        assert sum(1 for ln in lines if ln.startswith('v ')) == 4
        assert sum(1 for ln in lines if ln.startswith('f ')) == 4

    def test_one_based_reference_tet(self, tmp_path):
        (tmp_path / 'tet.node').write_text("4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n")
        (tmp_path / 'tet.ele').write_text("1 4 0\n1 1 2 3 4\n")
        mesh = load_mesh(tmp_path / 'tet.node')
        assert (mesh.n_vertices, mesh.n_tets) == (4, 1)
        assert len(mesh.boundary_faces) == 4

    def test_separate_element_path(self, tmp_path, unit_tet):
        save_mesh(unit_tet, tmp_path / 'a.node', tmp_path / 'sub' / 'b.ele')
        assert not (tmp_path / 'a.ele').exists()
        mesh = load_mesh(tmp_path / 'a.node', tmp_path / 'sub' / 'b.ele')
        assert total_volume(mesh) == pytest.approx(1.0 / 6.0)

    def test_saved_files_are_tetgen(self, tmp_path, small_cylinder):
        save_mesh(small_cylinder, tmp_path / 'cyl.node')
        raw = meshio.read(tmp_path / 'cyl.node', file_format='tetgen')
        assert raw.points.shape[0] == small_cylinder.n_vertices
        assert raw.cells_dict['tetra'].shape == (small_cylinder.n_tets, 4)

    def test_five_index_element_row(self, tmp_path):
        (tmp_path / 'm.node').write_text("4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n")
        (tmp_path / 'm.ele').write_text("1 5 0\n1 1 2 3 4 4\n")
        with pytest.raises(MeshError, match="header"):
            load_mesh(tmp_path / 'm.node')
