"""Exponential and logarithm maps for 2D deformation fields.

The exponential of a stationary velocity field is computed two ways: fast
scaling-and-squaring (compose a small scaled step with itself repeatedly) and
an independent fixed-step RK4 flow integrator that serves as the oracle in
tests.  The logarithm baseline is inverse scaling-and-squaring (ISS):
optimize successive square roots of the deformation until it is close to the
identity, then rescale the final root's displacement.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fields import (
    DeformationField,
    Grid2,
    VectorField,
    _check_same_grid,
    field_rms,
    grid_coords,
    negate,
    sample_displacement,
    self_compose,
)


class NonConvergenceWarning(RuntimeWarning):
    """A square-root optimization stopped above its residual target.

    Sensitivity to initialization is a known failure mode of the iterative
    root finding; the result is still returned, this warning carries the
    final residual (and the root stage for multi-stage logs).
    """

    def __init__(self, message: str, residual: float, stage: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.stage = stage


@dataclass(frozen=True)
class IssConfig:
    """Settings for square-root optimization and the ISS logarithm."""

    n_roots: int = 6
    sqrt_max_iters: int = 500
    sqrt_tol: float = 1e-4
    step_size: float = 1e-1

    def __post_init__(self) -> None:
        if self.n_roots < 1:
            raise ValueError("n_roots must be >= 1")
        if self.sqrt_max_iters < 1 or self.sqrt_tol <= 0 or self.step_size <= 0:
            raise ValueError("iteration and step settings must be positive")
        if self.sqrt_tol >= 1:
            raise ValueError("sqrt_tol must be < 1 grid unit")


@dataclass(frozen=True)
class ExpConfig:
    """Settings for the exponential map and its ODE oracle."""

    n_squarings: int = 6
    oracle_steps: int = 256

    def __post_init__(self) -> None:
        if self.n_squarings < 0:
            raise ValueError("n_squarings must be >= 0")
        if self.oracle_steps < 16:
            raise ValueError("oracle_steps must be >= 16")


def exp_scaling_squaring(v: VectorField, cfg: ExpConfig = ExpConfig()) -> DeformationField:
    """exp(v) by composing the small step id + v / 2**S with itself S times."""
    step = DeformationField(VectorField(v.grid, v.data / float(2 ** cfg.n_squarings)))
    return self_compose(step, cfg.n_squarings)


def exp_ode_oracle(v: VectorField, t: float, cfg: ExpConfig = ExpConfig()) -> DeformationField:
    """Flow of the stationary velocity v for time t, fixed-step RK4.

    Integrates d phi_t(x) / dt = v(phi_t(x)) from phi_0 = id; v is sampled
    with clamped bilinear interpolation along the trajectories.  Fixed step
    count keeps the oracle deterministic.
    """
    if not np.isfinite(t) or abs(t) > 1.0:
        raise ValueError("t must lie in [-1, 1]")
    coords = grid_coords(v.grid)
    pos = coords.copy()
    h = t / float(cfg.oracle_steps)

    def vel(p):
        return sample_displacement(v, p)

    for _ in range(cfg.oracle_steps):
        k1 = vel(pos)
        k2 = vel(pos + (0.5 * h) * k1)
        k3 = vel(pos + (0.5 * h) * k2)
        k4 = vel(pos + h * k3)
        pos = pos + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return DeformationField(VectorField(v.grid, pos - coords))


def _sqrt_minimize(phi_disp: np.ndarray, cfg: IssConfig):
    """Gradient descent on ||psi o psi - phi||^2 over psi's displacement.

    Returns (displacement, residual_rms, iterations, converged).  The descent
    direction is the gradient of the summed squared residual, which keeps the
    per-pixel update scale independent of the grid size; progress is measured
    as the RMS residual in grid units.  The step is halved whenever a trial
    update fails to decrease the objective.
    """
    H, W = phi_disp.shape[2], phi_disp.shape[3]
    n_px = float(H * W)
    target = ad.Tensor(phi_disp)

    def objective(disp: np.ndarray, need_grad: bool):
        t = ad.Tensor(disp, requires_grad=need_grad)
        r = ad.sub(ad.warp(t, t), target)
        loss = ad.sum_all(ad.square(r))
        if need_grad:
            ad.backward(loss)
            return float(loss.data), t.grad
        return float(loss.data), None

    psi = 0.5 * phi_disp
    cur, _ = objective(psi, False)
    step = cfg.step_size
    iters = 0
    for _ in range(cfg.sqrt_max_iters):
        if np.sqrt(cur / n_px) <= cfg.sqrt_tol:
            break
        _, grad = objective(psi, True)
        trial = psi - step * grad
        trial_loss, _ = objective(trial, False)
        iters += 1
        if trial_loss < cur:
            psi = trial
            cur = trial_loss
        else:
            step *= 0.5
            if step < 1e-12:
                break
    rms = float(np.sqrt(cur / n_px))
    return psi, rms, iters, rms <= cfg.sqrt_tol


def _to_batch(f: DeformationField) -> np.ndarray:
    return np.moveaxis(f.displacement.data, -1, 0)[None]


def _from_batch(grid: Grid2, arr: np.ndarray) -> DeformationField:
    return DeformationField(VectorField(grid, np.moveaxis(arr[0], 0, -1)))


def sqrt_field(phi: DeformationField, cfg: IssConfig = IssConfig()) -> DeformationField:
    """Square root psi with psi o psi ~= phi, initialized at id + u / 2.

    Emits NonConvergenceWarning (result still returned) when the residual is
    above 10x the tolerance at the iteration cap.
    """
    disp, rms, _, _ = _sqrt_minimize(_to_batch(phi), cfg)
    if rms > 10.0 * cfg.sqrt_tol:
        warnings.warn(
            NonConvergenceWarning(
                f"square root stopped at residual {rms:.3e} "
                f"(target {cfg.sqrt_tol:.1e})",
                residual=rms,
            ),
            stacklevel=2,
        )
    return _from_batch(phi.grid, disp)


def iss_roots(phi: DeformationField, cfg: IssConfig = IssConfig()) -> list[DeformationField]:
    """Successive square roots [phi^(1/2), phi^(1/4), ..., phi^(1/2**N)]."""
    roots: list[DeformationField] = []
    cur = _to_batch(phi)
    for stage in range(cfg.n_roots):
        cur, rms, _, _ = _sqrt_minimize(cur, cfg)
        if rms > 10.0 * cfg.sqrt_tol:
            warnings.warn(
                NonConvergenceWarning(
                    f"root stage {stage} stopped at residual {rms:.3e} "
                    f"(target {cfg.sqrt_tol:.1e})",
                    residual=rms,
                    stage=stage,
                ),
                stacklevel=2,
            )
        roots.append(_from_batch(phi.grid, cur))
    return roots


def iss_log(phi: DeformationField, cfg: IssConfig = IssConfig()) -> VectorField:
    """Inverse scaling-and-squaring logarithm: 2**N times the 2**N-th root."""
    root = iss_roots(phi, cfg)[-1]
    return VectorField(phi.grid, root.displacement.data * float(2 ** cfg.n_roots))


@dataclass(frozen=True)
class NegationReport:
    """Residuals of the root-negation consistency check, in RMS grid units.

    residual_vs_bwd: the negated root composed 2**N times, against the
    inverse field.  residual_vs_fwd: the root itself composed 2**N times,
    against the forward field (negating the inverse-side root recovers the
    forward root, so this is the symmetric check).
    """

    residual_vs_bwd: float
    residual_vs_fwd: float


def validate_log_negation(
    fwd: DeformationField,
    bwd: DeformationField,
    root_n: DeformationField,
    cfg: IssConfig = IssConfig(),
) -> NegationReport:
    """Check that negating the 2**N-th root of fwd recovers bwd when composed.

    Near the identity a displacement and its inverse are approximate
    negations of each other, so id - u_root composed 2**N times should land
    on the inverse field.
    """
    _check_same_grid(fwd.grid, bwd.grid)
    _check_same_grid(fwd.grid, root_n.grid)
    neg_root = DeformationField(negate(root_n.displacement))
    recovered_bwd = self_compose(neg_root, cfg.n_roots)
    recovered_fwd = self_compose(root_n, cfg.n_roots)
    return NegationReport(
        residual_vs_bwd=field_rms(recovered_bwd.displacement.data - bwd.displacement.data),
        residual_vs_fwd=field_rms(recovered_fwd.displacement.data - fwd.displacement.data),
    )
