"""Kernel spectra and realized kernel matrices.

A Spectrum stores the distinct eigenvalues of the empirical kernel
Theta = (1/D) J J^T together with multiplicities.  The exact-dynamics code
(theory, sweeps) only ever needs the distinct values, so problems with a
handful of eigenvalue blocks cost O(#blocks) per step regardless of D.
The Monte Carlo simulator needs an actual matrix; realize_ntk draws a
Haar-random orthogonal eigenbasis and assembles the dense D x D kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# Dense realization above this dimension is almost certainly a mistake
# (D^2 doubles); callers can raise the cap explicitly if they mean it.
DENSE_NTK_CAP = 4096


@dataclass(frozen=True)
class Spectrum:
    """Distinct nonnegative eigenvalues with integer multiplicities.

    Entries are canonicalized on construction: sorted by eigenvalue in
    descending order and exact duplicates merged, so two Spectrums built
    from the same multiset of eigenvalues compare equal and expand() is
    deterministic.
    """

    entries: tuple[tuple[float, int], ...]

    def __post_init__(self):
        if len(self.entries) == 0:
            raise ValueError("spectrum needs at least one entry")
        cleaned = []
        for value, count in self.entries:
            value = float(value)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"eigenvalue must be finite and >= 0, got {value}")
            if count != int(count) or int(count) < 1:
                raise ValueError(f"multiplicity must be a positive integer, got {count}")
            cleaned.append((value, int(count)))
        cleaned.sort(key=lambda vc: -vc[0])
        merged: list[tuple[float, int]] = []
        for value, count in cleaned:
            if merged and merged[-1][0] == value:
                merged[-1] = (value, merged[-1][1] + count)
            else:
                merged.append((value, count))
        object.__setattr__(self, "entries", tuple(merged))

    @property
    def dim(self) -> int:
        """Total mode count D."""
        return sum(c for _, c in self.entries)

    @property
    def values(self) -> np.ndarray:
        """Distinct eigenvalues, descending."""
        return np.array([v for v, _ in self.entries], dtype=float)

    @property
    def counts(self) -> np.ndarray:
        return np.array([c for _, c in self.entries], dtype=np.int64)

    def expand(self) -> np.ndarray:
        """Length-D eigenvalue vector, descending."""
        return np.repeat(self.values, self.counts)

    def to_json(self) -> str:
        return json.dumps({"entries": [[v, c] for v, c in self.entries]})

    @classmethod
    def from_json(cls, text: str) -> "Spectrum":
        data = json.loads(text)
        return cls(tuple((float(v), int(c)) for v, c in data["entries"]))


def make_isotropic(D: int, value: float = 1.0) -> Spectrum:
    """All D eigenvalues equal to `value`."""
    if D < 1:
        raise ValueError(f"D must be >= 1, got {D}")
    return Spectrum(((value, D),))


def make_spiked(D: int, bulk_frac: float, bulk_val: float, spike_ratio: float) -> Spectrum:
    """Two-block spectrum: round(bulk_frac*D) modes at bulk_val, rest at spike_ratio*bulk_val."""
    if D < 2:
        raise ValueError(f"spiked spectrum needs D >= 2, got {D}")
    bulk_count = int(round(bulk_frac * D))
    spike_count = D - bulk_count
    if bulk_count < 1 or spike_count < 1:
        raise ValueError(
            f"bulk_frac={bulk_frac} with D={D} gives counts ({bulk_count}, {spike_count}); "
            "both blocks need at least one mode"
        )
    return Spectrum(((bulk_val, bulk_count), (spike_ratio * bulk_val, spike_count)))


def make_power_law(D: int, alpha: float) -> Spectrum:
    """Eigenvalues i^alpha for i = 1..D, normalized so the largest is 1."""
    if D < 1:
        raise ValueError(f"D must be >= 1, got {D}")
    lam = np.arange(1, D + 1, dtype=float) ** alpha
    lam /= lam.max()
    return Spectrum(tuple((float(v), 1) for v in lam))


@dataclass(frozen=True)
class NtkMatrix:
    """Dense realization Theta = V diag(lam) V^T with orthonormal V."""

    spectrum: Spectrum
    basis: np.ndarray   # columns are eigenvectors, aligned with spectrum.expand()
    matrix: np.ndarray  # the kernel itself

    @property
    def dim(self) -> int:
        return self.spectrum.dim


def realize_ntk(spec: Spectrum, seed: int, cap: int = DENSE_NTK_CAP) -> NtkMatrix:
    """Draw a Haar-random orthogonal eigenbasis and assemble the kernel.

    Deterministic for a fixed seed: the basis is the QR orthogonalization
    of a seeded standard-normal matrix, with column signs fixed by the
    diagonal of R so the distribution is exactly Haar.
    """
    D = spec.dim
    if D > cap:
        raise ValueError(f"dense realization of D={D} exceeds cap={cap}")
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((D, D)))
    signs = np.where(np.diag(R) >= 0.0, 1.0, -1.0)
    V = Q * signs
    lam = spec.expand()
    theta = (V * lam) @ V.T
    theta = 0.5 * (theta + theta.T)
    return NtkMatrix(spectrum=spec, basis=V, matrix=theta)
