"""Synthetic diffeomorphism pairs with known ground-truth velocities.

Each pair comes from a low-rank velocity family: a fixed set of
Gaussian-smoothed white-noise basis fields (separable kernel truncated at
radius 3 sigma, border-clamped), each normalized to unit peak magnitude, is
mixed with seeded Gaussian coefficients.  The mix is scaled so typical peak
displacements sit around three quarters of `max_disp` and is capped at
`max_disp`, which guarantees the advertised bound while keeping most samples
exactly linear in their coefficients.  Forward and backward fields are the
flows of the mixed velocity to t = +1 and t = -1, so every pair is
inverse-consistent by construction and its principal logarithm is known.

A scalar covariate rides along with every pair as a noisy linear function of
the mixing coefficients, standing in for the clinical variables a real
registration dataset would carry.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fields import DeformationField, Grid2, VectorField
from .groupmaps import ExpConfig, exp_ode_oracle

_BASIS_STREAM = 0
_PAIR_STREAM = 1
_MIX_FRACTION = 0.8  # typical peak displacement as a fraction of max_disp


@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    n_pairs: int = 500
    smooth_sigma: float = 3.0
    max_disp: float = 3.0
    n_factors: int = 4
    covariate_weights: tuple[float, ...] | None = None
    noise_sigma: float = 0.1
    seed: int = 0
    oracle_steps: int = 256

    def __post_init__(self) -> None:
        if self.n_pairs < 1 or self.n_factors < 1:
            raise ValueError("n_pairs and n_factors must be >= 1")
        if self.smooth_sigma < 1.0:
            raise ValueError("smooth_sigma must be >= 1")
        if not 0.0 <= self.max_disp < min(self.height, self.width) / 4.0:
            raise ValueError("max_disp must satisfy 0 <= max_disp < min(H, W) / 4")
        if self.covariate_weights is not None:
            if len(self.covariate_weights) != self.n_factors:
                raise ValueError("covariate_weights length must equal n_factors")
            object.__setattr__(
                self, "covariate_weights", tuple(float(w) for w in self.covariate_weights)
            )

    @property
    def grid(self) -> Grid2:
        return Grid2(self.height, self.width)

    @property
    def weights(self) -> np.ndarray:
        if self.covariate_weights is not None:
            return np.asarray(self.covariate_weights, dtype=np.float64)
        return np.array([(-0.5) ** j for j in range(self.n_factors)])


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _smooth(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma, border-clamped."""
    k = _gaussian_kernel(sigma)
    radius = (len(k) - 1) // 2
    out = img
    for axis in range(2):
        moved = np.moveaxis(out, axis, 0)
        padded = np.concatenate(
            [np.repeat(moved[:1], radius, axis=0), moved, np.repeat(moved[-1:], radius, axis=0)],
            axis=0,
        )
        n = moved.shape[0]
        acc = np.zeros_like(moved)
        for i, w in enumerate(k):
            acc += w * padded[i : i + n]
        out = np.moveaxis(acc, 0, axis)
    return out


@lru_cache(maxsize=8)
def _basis_fields(cfg: SynthConfig) -> np.ndarray:
    """(n_factors, H, W, 2) basis velocities, each normalized to unit peak."""
    rng = np.random.default_rng([cfg.seed, _BASIS_STREAM])
    basis = np.empty((cfg.n_factors, cfg.height, cfg.width, 2))
    for j in range(cfg.n_factors):
        for comp in range(2):
            basis[j, :, :, comp] = _smooth(
                rng.standard_normal((cfg.height, cfg.width)), cfg.smooth_sigma
            )
        basis[j] /= np.max(np.linalg.norm(basis[j], axis=-1))
    return basis


def gen_velocity(cfg: SynthConfig, coeffs: np.ndarray) -> VectorField:
    """Mix of the basis fields, peak magnitude capped at max_disp."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    mix_scale = _MIX_FRACTION * cfg.max_disp / np.sqrt(cfg.n_factors)
    raw = mix_scale * np.tensordot(coeffs, _basis_fields(cfg), axes=(0, 0))
    peak = float(np.max(np.linalg.norm(raw, axis=-1)))
    if cfg.max_disp == 0.0:
        raw = np.zeros_like(raw)
    elif peak > cfg.max_disp:
        raw = raw * (cfg.max_disp / peak)
    return VectorField(cfg.grid, raw)


def gen_synthetic_pair(cfg: SynthConfig, index: int):
    """One pair: (fwd, bwd, gt_velocity, coeffs, covariate).

    fwd = exp(v) and bwd = exp(-v) integrated with the flow oracle, so the
    pair is inverse-consistent by construction and v is its known logarithm.
    The covariate is weights . coeffs + noise_sigma * noise.  Deterministic
    for a given (seed, index).
    """
    rng = np.random.default_rng([cfg.seed, _PAIR_STREAM, index])
    coeffs = rng.standard_normal(cfg.n_factors)
    noise = rng.standard_normal()
    velocity = gen_velocity(cfg, coeffs)
    ecfg = ExpConfig(oracle_steps=cfg.oracle_steps)
    fwd = exp_ode_oracle(velocity, 1.0, ecfg)
    bwd = exp_ode_oracle(velocity, -1.0, ecfg)
    covariate = float(cfg.weights @ coeffs + cfg.noise_sigma * noise)
    return fwd, bwd, velocity, coeffs, covariate


@dataclass(frozen=True)
class SynthPair:
    index: int
    fwd: DeformationField
    bwd: DeformationField
    velocity: VectorField
    coeffs: np.ndarray
    covariate: float


def gen_dataset(cfg: SynthConfig) -> list[SynthPair]:
    """All n_pairs pairs of the configured family."""
    out = []
    for i in range(cfg.n_pairs):
        fwd, bwd, vel, coeffs, cov = gen_synthetic_pair(cfg, i)
        out.append(SynthPair(i, fwd, bwd, vel, coeffs, cov))
    return out
