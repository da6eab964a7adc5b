import numpy as np
import pytest
import scipy.linalg

from dynbc.assembly import (AssemblyError, SparseSymMatrix, assemble_block_system,
                            assemble_bulk, assemble_surface, dump_matrix,
                            partition_blocks)
from dynbc.linalg import solve_spd
from dynbc.mesh import generate_crisscross_square, generate_disk_mesh, \
    mesh_from_arrays, triangle_areas


def reference_triangle():
    return mesh_from_arrays([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]],
                            [[0, 1], [1, 2], [2, 0]])


def test_element_stiffness_reference():
    m, a = assemble_bulk(reference_triangle(), 1.0, 0.0)
    expected = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0],
                               [-1.0, 0.0, 1.0]])
    np.testing.assert_allclose(a.toarray(), expected, atol=1e-15)


def test_element_mass_reference():
    m, _ = assemble_bulk(reference_triangle(), 1.0, 0.0)
    expected = (np.ones((3, 3)) + np.eye(3)) / 24.0
    np.testing.assert_allclose(m.toarray(), expected, atol=1e-16)


def test_stiffness_annihilates_constants(disk_medium):
    _, a = assemble_bulk(disk_medium, 1.0, 0.0)
    one = np.ones(disk_medium.n_omega)
    assert np.abs(a.matvec(one)).max() <= 1e-12


def test_surface_edge_formulas():
    # boundary edge of length 2 inside a valid one-triangle mesh
    mesh = mesh_from_arrays([[0, 0], [2, 0], [0, 2]], [[0, 1, 2]],
                            [[0, 1], [1, 2], [2, 0]])
    mg, ag = assemble_surface(mesh, 1.0, 0.0)
    # the (0,1) edge has length 2: mass (1/3)[[2,1],[1,2]], stiffness
    # (1/2)[[1,-1],[-1,1]]
    assert mg.toarray()[0, 1] == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert ag.toarray()[0, 1] == pytest.approx(-0.5, abs=1e-15)


def test_surface_wentzell_case(disk_coarse):
    mg, ag = assemble_surface(disk_coarse, 0.0, 0.7)
    np.testing.assert_array_equal(ag.toarray(), 0.7 * mg.toarray())


def test_surface_stiffness_annihilates_constants(disk_medium):
    _, ag = assemble_surface(disk_medium, 1.0, 0.0)
    one = np.ones(disk_medium.n_gamma)
    assert np.abs(ag.matvec(one)).max() <= 1e-12


def test_mass_sums_match_geometry(disk_medium):
    m, _ = assemble_bulk(disk_medium, 1.0, 0.0)
    mg, _ = assemble_surface(disk_medium, 1.0, 0.0)
    one = np.ones(disk_medium.n_omega)
    oneg = np.ones(disk_medium.n_gamma)
    area = triangle_areas(disk_medium.nodes, disk_medium.triangles).sum()
    d = disk_medium.nodes[disk_medium.boundary_edges[:, 0]] \
        - disk_medium.nodes[disk_medium.boundary_edges[:, 1]]
    perimeter = np.hypot(d[:, 0], d[:, 1]).sum()
    assert one @ m.matvec(one) == pytest.approx(area, abs=1e-10)
    assert oneg @ mg.matvec(oneg) == pytest.approx(perimeter, abs=1e-10)


def test_value_symmetry(disk_medium):
    m, a = assemble_bulk(disk_medium, 2.5, 0.3)
    for mat in (m, a):
        assert mat.value_asymmetry() <= 1e-14 * np.abs(mat.data).max()


def test_mass_matrix_positive_definite(disk_coarse):
    m, _ = assemble_bulk(disk_coarse, 1.0, 0.0)
    # inverse power iteration for the smallest eigenvalue
    rng = np.random.default_rng(0)
    v = rng.standard_normal(m.dim)
    v /= np.linalg.norm(v)
    lam = np.inf
    for _ in range(60):
        w = solve_spd(m, v)
        lam = float(v @ w)  # 1/lambda_min estimate grows, stays positive
        v = w / np.linalg.norm(w)
    assert 1.0 / lam > 0.0
    # dense cross-check
    assert scipy.linalg.eigvalsh(m.toarray()).min() > 0.0


def test_kappa_scaling_exact(disk_coarse):
    _, a1 = assemble_bulk(disk_coarse, 1.0, 0.0)
    _, a2 = assemble_bulk(disk_coarse, 2.0, 0.0)
    np.testing.assert_array_equal(a2.data, 2.0 * a1.data)


def test_kappa_per_element_and_callable(disk_coarse):
    n_tri = len(disk_coarse.triangles)
    values = np.linspace(1.0, 2.0, n_tri)
    _, a_arr = assemble_bulk(disk_coarse, values, 0.0)
    _, a_fn = assemble_bulk(
        disk_coarse,
        lambda c: np.interp(np.arange(n_tri), np.arange(n_tri), values), 0.0)
    np.testing.assert_array_equal(a_arr.data, a_fn.data)
    with pytest.raises(AssemblyError):
        assemble_bulk(disk_coarse, 0.0, 0.0)
    with pytest.raises(AssemblyError):
        assemble_bulk(disk_coarse, -1.0, 0.0)


def test_partition_one_interior_node(criss1):
    m, a = assemble_bulk(criss1, 1.0, 0.0)
    blocks = partition_blocks(m, a, criss1.n_gamma)
    dense = m.toarray()
    assert blocks.M11.toarray().shape == (1, 1)
    assert blocks.M11.toarray()[0, 0] == pytest.approx(dense[0, 0], abs=1e-16)
    # the center node touches four cells of area 1/4: sum 2*T/12 each
    assert blocks.M11.toarray()[0, 0] == pytest.approx(1.0 / 6.0, abs=1e-15)


def test_partition_roundtrip(disk_coarse):
    m, a = assemble_bulk(disk_coarse, 1.0, 0.2)
    blocks = partition_blocks(m, a, disk_coarse.n_gamma)
    n1 = blocks.n1
    rebuilt = np.block(
        [[blocks.M11.toarray(), blocks.M12.toarray()],
         [blocks.M21.toarray(), blocks.M22.toarray()]])
    np.testing.assert_array_equal(rebuilt, m.toarray())
    # dense brute-force split agrees
    np.testing.assert_array_equal(blocks.A21.toarray(),
                                  a.toarray()[n1:, :n1])


def test_partition_degenerate_and_errors(disk_coarse):
    m, a = assemble_bulk(disk_coarse, 1.0, 0.0)
    blocks = partition_blocks(m, a, 0)
    assert blocks.M11.dim == m.dim
    assert blocks.M12.shape == (m.dim, 0)
    with pytest.raises(AssemblyError):
        partition_blocks(m, a, m.dim)


def test_block_symmetry_invariant(disk_medium):
    m, a, blocks = assemble_block_system(disk_medium, 1.0, 0.1, 1.0, 0.2)
    d = blocks.M12 - blocks.M21.T
    assert d.nnz == 0 or np.abs(d.data).max() <= 1e-15
    for sym in (blocks.M11, blocks.M22, blocks.M_gamma):
        assert scipy.linalg.eigvalsh(sym.toarray()).min() > 0.0
    assert scipy.linalg.eigvalsh(blocks.A_gamma.toarray()).min() >= -1e-12


def test_assembly_deterministic(disk_medium):
    m1, a1 = assemble_bulk(disk_medium, 1.0, 0.0)
    m2, a2 = assemble_bulk(disk_medium, 1.0, 0.0)
    np.testing.assert_array_equal(m1.data, m2.data)
    np.testing.assert_array_equal(a1.data, a2.data)


def test_structural_symmetry_enforced():
    with pytest.raises(AssemblyError):
        SparseSymMatrix.from_coo(2, [0], [1], [1.0])


def test_dump_matrix_roundtrip(tmp_path, criss1):
    m, _ = assemble_bulk(criss1, 1.0, 0.0)
    path = tmp_path / "m.txt"
    dump_matrix(m, path)
    lines = path.read_text().strip().splitlines()
    head = lines[0].split()
    assert head[:2] == ["%", "dim"] and int(head[2]) == m.dim
    assert int(head[4]) == m.nnz
    dense = np.zeros((m.dim, m.dim))
    for line in lines[1:]:
        i, j, v = line.split()
        dense[int(i) - 1, int(j) - 1] = float(v)
    np.testing.assert_array_equal(dense, m.toarray())
