import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial import hermite as H

from bosemix.sp_ho import (Grid, default_grid, gauss_hermite_grid, hermite_function, hermite_functions,
                           momentum_mode_phase, sp_energy, uniform_grid, x_squared_element, x_squared_matrix)


def _oracle_phi(n, x):
    # physicists' Hermite polynomial through numpy, normalized explicitly
    c = np.zeros(n + 1)
    c[n] = 1.0
    norm = 1.0 / math.sqrt(2.0 ** n * math.factorial(n) * math.sqrt(math.pi))
    return norm * H.hermval(x, c) * np.exp(-x * x / 2)


@pytest.mark.parametrize("n", [0, 1, 2, 5, 12, 30])
def test_hermite_matches_polynomial_oracle(n):
    x = np.linspace(-6, 6, 97)
    assert np.allclose(hermite_function(n, x), _oracle_phi(n, x), atol=1e-12)


def test_orthonormal_on_quadrature():
    grid = default_grid(40)
    phi = hermite_functions(40, grid.points)
    gram = (phi * grid.weights) @ phi.T
    assert np.allclose(gram, np.eye(41), atol=1e-12)


def test_large_argument_does_not_overflow():
    vals = hermite_functions(200, np.array([-60.0, 0.0, 60.0]))
    assert np.all(np.isfinite(vals))
    assert np.all(np.abs(vals[:, [0, 2]]) < 1e-300)


def test_parity_symmetry():
    x = np.linspace(0.1, 5, 20)
    phi_p, phi_m = hermite_functions(15, x), hermite_functions(15, -x)
    signs = (-1.0) ** np.arange(16)
    assert np.allclose(phi_m, signs[:, None] * phi_p, atol=1e-14)


def test_x_squared_matrix_against_quadrature():
    n = 12
    grid = default_grid(n + 2)
    phi = hermite_functions(n - 1, grid.points)
    quad = (phi * grid.weights * grid.points ** 2) @ phi.T
    assert np.allclose(x_squared_matrix(n), quad, atol=1e-12)
    assert x_squared_element(3, 5) == pytest.approx(quad[3, 5])
    assert x_squared_element(4, 4) == 4.5


def test_energy_and_phase():
    assert sp_energy(0) == 0.5 and sp_energy(7) == 7.5
    assert [momentum_mode_phase(n) for n in range(5)] == [1, -1j, -1, 1j, 1]
    with pytest.raises(ValueError):
        sp_energy(-1)
    with pytest.raises(ValueError):
        hermite_functions(2.5, 0.0)


def test_fourier_transform_eigenphase():
    # numerical FT of phi_n on a fine uniform grid
    g = uniform_grid(14, 4001)
    k = np.array([-1.3, 0.0, 0.7, 2.2])
    for n in (0, 1, 2, 3, 6):
        f = hermite_function(n, g.points)
        ft = g.integrate(f[None, :] * np.exp(-1j * np.outer(k, g.points))) / math.sqrt(2 * math.pi)
        assert np.allclose(ft, momentum_mode_phase(n) * hermite_function(n, k), atol=1e-10)


def test_grid_roundtrip(tmp_path):
    g = gauss_hermite_grid(9)
    g.to_csv(tmp_path / "g.csv")
    h = Grid.from_csv(tmp_path / "g.csv")
    assert np.array_equal(g.points, h.points) and np.array_equal(g.weights, h.weights)
    with pytest.raises(ValueError):
        Grid(np.array([0.0, 0.0]), np.array([1.0, 1.0]))


@given(st.integers(0, 25), st.integers(0, 25))
def test_quadrature_exact_for_mode_products(i, j):
    grid = gauss_hermite_grid(26)
    phi = hermite_functions(25, grid.points)
    assert grid.integrate(phi[i] * phi[j]) == pytest.approx(float(i == j), abs=1e-12)
