"""
Shared fixtures for the test suite
"""
import numpy as np
import pytest

from models.tables import AbundanceTable, ResponseVector


def random_spd(rng, m):
    """Well-conditioned symmetric positive definite m x m matrix"""
    A = rng.standard_normal((m, m))
    return A @ A.T + m * np.eye(m)


def relative_error(actual, expected):
    return np.linalg.norm(np.asarray(actual) - np.asarray(expected)) / max(np.linalg.norm(expected), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def toy_table():
    """Four samples of three taxa, strictly positive counts"""
    values = np.array([
        [10.0, 5.0, 1.0],
        [3.0, 8.0, 2.0],
        [6.0, 6.0, 6.0],
        [1.0, 2.0, 9.0],
    ])
    return AbundanceTable(["s1", "s2", "s3", "s4"], ["A", "B", "C"], values)


@pytest.fixture
def toy_response():
    return ResponseVector(["s1", "s2", "s3", "s4"], [1.0, -0.5, 0.25, 2.0])


@pytest.fixture
def toy_newick():
    return "((A:1,B:2):3,C:4);"
