import numpy as np
import pytest

from twophase.spectrum import (
    NtkMatrix,
    Spectrum,
    make_isotropic,
    make_power_law,
    make_spiked,
    realize_ntk,
)


def test_entries_sorted_descending_and_merged():
    spec = Spectrum(((1.0, 3), (5.0, 2), (1.0, 4)))
    assert spec.entries == ((5.0, 2), (1.0, 7))
    assert spec.dim == 9
    assert list(spec.values) == [5.0, 1.0]
    assert list(spec.counts) == [2, 7]


def test_expand_matches_entries():
    spec = Spectrum(((2.0, 2), (0.5, 3)))
    assert list(spec.expand()) == [2.0, 2.0, 0.5, 0.5, 0.5]


def test_equal_multisets_compare_equal():
    a = Spectrum(((1.0, 1), (2.0, 1), (1.0, 1)))
    b = Spectrum(((2.0, 1), (1.0, 2)))
    assert a == b


def test_zero_eigenvalues_allowed():
    spec = Spectrum(((1.0, 2), (0.0, 3)))
    assert spec.dim == 5
    assert spec.values[-1] == 0.0


def test_validation_errors():
    with pytest.raises(ValueError):
        Spectrum(())
    with pytest.raises(ValueError):
        Spectrum(((-1.0, 2),))
    with pytest.raises(ValueError):
        Spectrum(((np.inf, 1),))
    with pytest.raises(ValueError):
        Spectrum(((1.0, 0),))
    with pytest.raises(ValueError):
        Spectrum(((1.0, 1.5),))


def test_json_roundtrip():
    spec = Spectrum(((20.0, 1), (1.0, 99)))
    assert Spectrum.from_json(spec.to_json()) == spec


def test_make_isotropic():
    spec = make_isotropic(7, value=3.0)
    assert spec.entries == ((3.0, 7),)
    with pytest.raises(ValueError):
        make_isotropic(0)


def test_make_spiked_counts():
    spec = make_spiked(100, 0.99, 1.0, 20.0)
    assert spec.entries == ((20.0, 1), (1.0, 99))
    with pytest.raises(ValueError):
        make_spiked(100, 1.0, 1.0, 20.0)  # spike block would be empty
    with pytest.raises(ValueError):
        make_spiked(1, 0.5, 1.0, 20.0)


def test_make_power_law():
    spec = make_power_law(400, -1.5)
    lam = spec.expand()
    assert lam[0] == 1.0
    assert len(lam) == 400
    assert (np.diff(lam) < 0).all()
    assert lam[7] == pytest.approx(8.0**-1.5, rel=1e-15)


def test_realize_ntk_reproduces_spectrum():
    spec = Spectrum(((2.0, 5), (1.0, 10), (0.25, 15)))
    ntk = realize_ntk(spec, seed=1)
    assert isinstance(ntk, NtkMatrix)
    assert ntk.dim == 30
    eig = np.linalg.eigvalsh(ntk.matrix)
    assert np.allclose(np.sort(eig), np.sort(spec.expand()), atol=1e-10)


def test_realize_ntk_basis_orthonormal_and_consistent():
    spec = make_isotropic(20, value=0.7)
    ntk = realize_ntk(spec, seed=5)
    V = ntk.basis
    assert np.allclose(V.T @ V, np.eye(20), atol=1e-12)
    lam = spec.expand()
    assert np.allclose((V * lam) @ V.T, ntk.matrix, atol=1e-12)
    assert np.allclose(ntk.matrix, ntk.matrix.T, atol=0.0)


def test_realize_ntk_deterministic_per_seed():
    spec = make_spiked(16, 0.75, 1.0, 4.0)
    a = realize_ntk(spec, seed=9)
    b = realize_ntk(spec, seed=9)
    c = realize_ntk(spec, seed=10)
    assert np.array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, c.matrix)


def test_realize_ntk_cap():
    with pytest.raises(ValueError):
        realize_ntk(make_isotropic(64), seed=0, cap=63)
