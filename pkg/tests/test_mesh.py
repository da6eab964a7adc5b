import math

import numpy as np
import pytest

from dynbc.mesh import (Mesh, MeshError, MeshResourceError, generate_crisscross_square,
                        generate_disk_mesh, load_mesh, mesh_from_arrays,
                        mesh_metrics, reorder_boundary_last, save_mesh,
                        triangle_areas)


def one_triangle(p0, p1, p2):
    return mesh_from_arrays([p0, p1, p2], [[0, 1, 2]],
                            [[0, 1], [1, 2], [2, 0]])


def test_crisscross_single_cell(criss1):
    assert criss1.n_omega == 5
    assert len(criss1.triangles) == 4
    assert criss1.n_gamma == 4
    # interior node (the cell center) comes first
    assert criss1.n_interior == 1
    np.testing.assert_allclose(criss1.nodes[0], [0.5, 0.5])


def test_crisscross_theta_value(criss1):
    assert criss1.theta == pytest.approx(1.0 + math.sqrt(2.0), abs=1e-10)


def test_crisscross_counts_and_area():
    m = generate_crisscross_square(4)
    assert len(m.triangles) == 64
    assert m.n_omega == 41
    assert m.n_gamma == 16
    assert triangle_areas(m.nodes, m.triangles).sum() == pytest.approx(
        1.0, abs=1e-12)


def test_crisscross_metrics_n2():
    m = generate_crisscross_square(2)
    assert m.h == pytest.approx(0.5, abs=1e-13)
    assert m.h_gamma == pytest.approx(0.5, abs=1e-13)


def test_crisscross_rejects_bad_n():
    with pytest.raises(ValueError):
        generate_crisscross_square(0)


def test_theta_equilateral():
    m = one_triangle([0, 0], [1, 0], [0.5, math.sqrt(3) / 2])
    assert mesh_metrics(m).theta == pytest.approx(2.0, abs=1e-10)


def test_theta_unit_right_triangle():
    m = one_triangle([0, 0], [1, 0], [0, 1])
    # R = sqrt(2)/2, r = (2 - sqrt(2))/2
    assert mesh_metrics(m).theta == pytest.approx(1.0 + math.sqrt(2.0),
                                                  abs=1e-10)


def test_disk_mesh_reference_size():
    m = generate_disk_mesh(0.2074)
    assert 100 <= m.n_omega <= 300
    assert 0.14 <= m.h <= 0.31
    assert m.h <= 1.5 * 0.2074


def test_disk_mesh_boundary_on_circle():
    m = generate_disk_mesh(0.2074)
    r = np.hypot(m.boundary_nodes[:, 0], m.boundary_nodes[:, 1])
    assert np.abs(r - 1.0).max() <= 1e-12


def test_disk_mesh_coarsest():
    m = generate_disk_mesh(1.0)
    assert len(m.triangles) >= 4
    assert m.h <= 1.5
    assert math.isfinite(m.theta) and m.theta >= 2.0 - 1e-9


def test_disk_refinement_ratio():
    targets = [0.25 / math.sqrt(2.0) ** j for j in range(4)]
    hs = [generate_disk_mesh(t).h for t in targets]
    for a, b in zip(hs, hs[1:]):
        assert 1.2 <= a / b <= 1.7


def test_disk_area_converges_from_below():
    for target in (0.1, 0.06):
        m = generate_disk_mesh(target)
        area = triangle_areas(m.nodes, m.triangles).sum()
        assert area < math.pi
        assert abs(area - math.pi) <= 2.0 * m.h ** 2


@pytest.mark.parametrize("make", [lambda: generate_disk_mesh(0.3),
                                  lambda: generate_crisscross_square(3)])
def test_boundary_cycle_length_and_ordering(make):
    m = make()
    assert len(m.boundary_edges) == m.n_gamma
    on_boundary = np.unique(m.boundary_edges.ravel())
    np.testing.assert_array_equal(
        on_boundary, np.arange(m.n_omega - m.n_gamma, m.n_omega))
    assert np.all(triangle_areas(m.nodes, m.triangles) > 0.0)


def test_disk_target_h_validation():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            generate_disk_mesh(bad)


def test_disk_resource_guard():
    with pytest.raises(MeshResourceError):
        generate_disk_mesh(1e-5)


def test_save_load_roundtrip(tmp_path, criss1):
    path = tmp_path / "criss1.txt"
    save_mesh(criss1, path)
    m = load_mesh(path)
    np.testing.assert_allclose(m.nodes, criss1.nodes)
    np.testing.assert_array_equal(m.triangles, criss1.triangles)
    np.testing.assert_array_equal(m.boundary_edges, criss1.boundary_edges)


def test_load_reorients_clockwise_triangle(tmp_path):
    path = tmp_path / "cw.txt"
    path.write_text(
        "# one clockwise triangle\n"
        "NODES 3\n0 0\n1 0\n0 1\n"
        "TRIANGLES 1\n1 3 2\n"
        "BOUNDARY 3\n1 2\n2 3\n3 1\n")
    m = load_mesh(path)
    assert np.all(triangle_areas(m.nodes, m.triangles) > 0.0)


def test_load_reorders_interleaved_boundary(tmp_path):
    # cell center listed in the middle: boundary nodes are not trailing
    path = tmp_path / "interleaved.txt"
    path.write_text(
        "NODES 5\n0 0\n1 0\n0.5 0.5\n1 1\n0 1\n"
        "TRIANGLES 4\n1 2 3\n2 4 3\n4 5 3\n5 1 3\n"
        "BOUNDARY 4\n1 2\n2 4\n4 5\n5 1\n")
    m = load_mesh(path)
    assert m.reorder_map is not None
    assert m.n_gamma == 4
    # boundary-edge incidence: all listed edges reference trailing nodes
    assert m.boundary_edges.min() >= m.n_interior
    np.testing.assert_allclose(m.nodes[0], [0.5, 0.5])
    # connectivity preserved: every triangle still contains the center node
    assert all(0 in tri for tri in m.triangles.tolist())


def test_reorder_is_idempotent():
    rng = np.random.default_rng(42)
    base = generate_crisscross_square(2)
    perm = rng.permutation(base.n_omega)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(base.n_omega)
    nodes = base.nodes[perm]
    tris = inv[base.triangles]
    edges = inv[base.boundary_edges]
    n1, t1, e1, map1 = reorder_boundary_last(nodes, tris, edges)
    n2, t2, e2, map2 = reorder_boundary_last(n1, t1, e1)
    assert map2 is None
    np.testing.assert_array_equal(n1, n2)
    np.testing.assert_array_equal(t1, t2)
    np.testing.assert_array_equal(e1, e2)


def test_load_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("NODES 2\n0 0\nnot-a-number 1\n")
    with pytest.raises(MeshError, match="line 3"):
        load_mesh(path)


def test_load_open_boundary_cycle_rejected(tmp_path):
    path = tmp_path / "open.txt"
    path.write_text(
        "NODES 3\n0 0\n1 0\n0 1\n"
        "TRIANGLES 1\n1 2 3\n"
        "BOUNDARY 3\n1 2\n2 3\n2 1\n")
    with pytest.raises(MeshError, match="cycle"):
        load_mesh(path)


def test_load_wrong_boundary_list_rejected(tmp_path):
    # edge (1,3) is interior to nothing and edge list misses (2,3)
    path = tmp_path / "wrongbnd.txt"
    path.write_text(
        "NODES 4\n0 0\n1 0\n1 1\n0 1\n"
        "TRIANGLES 2\n1 2 3\n1 3 4\n"
        "BOUNDARY 4\n1 2\n2 3\n3 4\n4 1\n")
    m = load_mesh(path)  # valid square split into two triangles
    bad = tmp_path / "missing.txt"
    bad.write_text(
        "NODES 4\n0 0\n1 0\n1 1\n0 1\n"
        "TRIANGLES 2\n1 2 3\n1 3 4\n"
        "BOUNDARY 3\n1 2\n2 3\n3 1\n")
    with pytest.raises(MeshError):
        load_mesh(bad)
    assert m.n_gamma == 4


def test_degenerate_triangle_rejected():
    # sliver with area 5e-17 on an h = 1 mesh
    with pytest.raises(MeshError, match="degenerate"):
        one_triangle([0, 0], [1, 0], [0.5, 1e-16])


def test_mesh_arrays_immutable(criss1):
    with pytest.raises(ValueError):
        criss1.nodes[0, 0] = 7.0
