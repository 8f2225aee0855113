#!/usr/bin/env python3
"""
Modal Reduction Tests
Eigen solve, Rayleigh reduction, effective mass and field recovery
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import tempfile

import numpy as np

from src.modal import (
    ModalError, ModeShapeTable, effective_mass, euler_beam_frequencies, euler_beam_modes,
    lumped_chain_matrices, recover_field, reduce, solve_eigen
)

CHAIN_M = np.eye(2)
CHAIN_K = np.array([[2.0, -1.0], [-1.0, 2.0]])


def test_sdof_frequency():
    basis = solve_eigen(np.array([[1.0]]), np.array([[4.0]]), 1)
    assert abs(basis.omega[0] - 2.0) < 1e-12


def test_two_dof_chain_frequencies():
    basis = solve_eigen(CHAIN_M, CHAIN_K, 2)
    assert np.allclose(basis.Omega, [1.0, 3.0], atol=1e-8)
    assert np.allclose(basis.U.T @ CHAIN_M @ basis.U, np.eye(2), atol=1e-8)
    assert np.all(np.diff(basis.omega) >= 0)


def test_mass_normalization_and_residual():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(8, 8))
    M = A @ A.T + 8 * np.eye(8)
    B = rng.normal(size=(8, 8))
    K = B @ B.T
    basis = solve_eigen(M, K, 5)
    assert np.allclose(basis.U.T @ M @ basis.U, np.eye(5), atol=1e-8)
    assert np.allclose(basis.U.T @ K @ basis.U, np.diag(basis.Omega), atol=1e-8)
    for i in range(5):
        u = basis.U[:, i]
        ku = K @ u
        assert np.linalg.norm(ku - basis.Omega[i] * M @ u) / np.linalg.norm(ku) < 1e-8


def test_solve_eigen_rejects_bad_input():
    for M, n in ((np.array([[1.0, 0.0], [0.0, -1.0]]), 1), (CHAIN_M, 3)):
        try:
            solve_eigen(M, CHAIN_K, n)
        except ModalError:
            continue
        raise AssertionError("expected ModalError")


def test_euler_beam_mode_values():
    m_r, l = 2.0, 3.0
    table = euler_beam_modes(m_r, l, 2, [0.0, l / 2, l])
    peak = np.sqrt(2.0 / (m_r * l))
    assert abs(table.values[1, 0] - peak) < 1e-12
    assert abs(table.values[1, 1]) < 1e-12
    assert np.allclose(table.values[[0, 2]], 0.0, atol=1e-12)


def test_euler_beam_rejects_outside_span():
    try:
        euler_beam_modes(1.0, 1.0, 3, [1.5])
    except ModalError:
        return
    raise AssertionError("expected ModalError")


def test_beam_frequencies():
    w = euler_beam_frequencies(5.0, 2.0, 2.0, 3)
    assert np.allclose(w, (np.arange(1, 4) * np.pi / 2.0) ** 2 * np.sqrt(2.5))


def test_reduce_damping():
    basis = solve_eigen(np.array([[1.0]]), np.array([[4.0]]), 1)
    body = reduce(np.array([[1.0]]), np.array([[4.0]]), basis, 0.1, 0.01)
    assert abs(body.damping[0] - 0.14) < 1e-12
    body = reduce(CHAIN_M, CHAIN_K, solve_eigen(CHAIN_M, CHAIN_K, 2), 0.0, 0.0)
    assert np.allclose(body.damping, 0.0)
    assert np.allclose(body.mu, 1.0)


def test_effective_mass():
    full = solve_eigen(CHAIN_M, CHAIN_K, 2)
    assert abs(effective_mass(full, CHAIN_M, np.ones(2)) - 1.0) < 1e-8
    first = solve_eigen(CHAIN_M, CHAIN_K, 1)
    assert abs(effective_mass(first, CHAIN_M, np.ones(2)) - 1.0) < 1e-8
    M, K = lumped_chain_matrices(12, 3.0, 100.0)
    assert abs(effective_mass(solve_eigen(M, K, 12), M, np.ones(12)) - 1.0) < 1e-8
    try:
        effective_mass(full, CHAIN_M, np.zeros(2))
    except ModalError:
        return
    raise AssertionError("expected ModalError")


def test_recover_field_superposition():
    table = euler_beam_modes(1.0, 2.0, 4, np.linspace(0, 2.0, 9))
    q = np.zeros((5, 4))
    q[:, 2] = 1.0
    field = recover_field(table, q)
    assert np.allclose(field, np.tile(table.values[:, 2], (5, 1)))
    assert np.allclose(recover_field(table, np.zeros((3, 4))), 0.0)


def test_projection_roundtrip():
    m_r, l = 1.5, 2.0
    x = np.linspace(0, l, 201)
    table = euler_beam_modes(m_r, l, 5, x)
    target = np.sin(np.pi * x / l)
    dx = x[1] - x[0]
    weights = np.full(x.size, dx)
    weights[[0, -1]] *= 0.5
    q = m_r * (table.values * weights[:, None]).T @ target
    # trapezoid quadrature of sin*sin on a uniform grid is exact for these modes
    rebuilt = recover_field(table, q[None, :])[0]
    assert np.linalg.norm(rebuilt - target) / np.linalg.norm(target) < 1e-10


def test_mesh_independence():
    q = np.random.default_rng(0).normal(size=(20, 6))
    coarse = euler_beam_modes(2.0, 1.0, 6, np.linspace(0, 1.0, 5))
    fine = euler_beam_modes(2.0, 1.0, 6, np.linspace(0, 1.0, 17))
    a = recover_field(coarse, q)
    b = recover_field(fine, q)
    assert np.allclose(a, b[:, ::4], atol=1e-12)


def test_mode_shape_csv_roundtrip():
    table = euler_beam_modes(1.0, 1.0, 3, [0.1, 0.4, 0.9])
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'shapes.csv')
        table.to_csv(path)
        back = ModeShapeTable.from_csv(path)
    assert back.values.shape == (3, 3)
    assert np.allclose(back.values, table.values, atol=1e-15)
    assert np.allclose(back.points[:, 0], [0.1, 0.4, 0.9])


if __name__ == "__main__":
    failures = 0
    for name, func in list(globals().items()):
        if name.startswith('test_') and callable(func):
            try:
                func()
                print(f"✅ {name}")
            except Exception as e:
                failures += 1
                print(f"❌ {name}: {e}")
    sys.exit(1 if failures else 0)
