"""Entropy-regularised optimal transport.

Forward Sinkhorn solver (log or linear domain), objective and dual
evaluation, and a differentiable fixed-depth solver used for training.

Plans have the form ``T = diag(pi) @ exp(-C / eps) @ diag(omega)``; the
solver keeps ``log pi`` and ``log omega`` and alternates the column and row
updates, starting from ``pi = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergence, NumericUnderflow, ShapeMismatch, UnbalancedMarginals

BALANCE_RTOL = 1e-6
FEASIBILITY_SLACK = 1e-12


def _frozen_array(x, dtype=float):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Marginals:
    """Supply ``mu`` (length m) and demand ``nu`` (length n).

    Totals that differ by more than ``BALANCE_RTOL`` (relative) are rejected;
    smaller discrepancies are removed by rescaling ``nu`` onto ``mu``.
    """

    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        nu = np.asarray(self.nu, dtype=float).ravel()
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(nu))):
            raise UnbalancedMarginals("marginals must be finite")
        if np.any(mu < 0) or np.any(nu < 0):
            raise UnbalancedMarginals("marginals must be nonnegative")
        smu, snu = mu.sum(), nu.sum()
        if smu <= 0 or snu <= 0:
            raise UnbalancedMarginals("marginals must carry positive total mass")
        if abs(smu - snu) > BALANCE_RTOL * max(smu, snu):
            raise UnbalancedMarginals(
                f"marginal totals differ: sum(mu)={smu!r}, sum(nu)={snu!r}"
            )
        if smu != snu:
            nu = nu * (smu / snu)
        object.__setattr__(self, "mu", _frozen_array(mu))
        object.__setattr__(self, "nu", _frozen_array(nu))

    @property
    def total(self) -> float:
        return float(self.mu.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return (self.mu.size, self.nu.size)


@dataclass(frozen=True)
class CostMatrix:
    """Cost values with the regularisation strength ``epsilon``.

    Fitted costs live in [0, 1]; shifted or rescaled costs (gauge
    transformations) may leave that range, so it is reported by
    :attr:`in_unit_range` rather than enforced.
    """

    values: np.ndarray
    epsilon: float = 0.1

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.ndim != 2:
            raise ShapeMismatch(f"cost must be a matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("cost entries must be finite")
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")
        object.__setattr__(self, "values", _frozen_array(values))
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def in_unit_range(self) -> bool:
        return bool(np.all((self.values >= 0) & (self.values <= 1)))

    def kernel(self) -> np.ndarray:
        return np.exp(-self.values / self.epsilon)


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative flow matrix; ``mask`` is True where the entry is observed.

    Unobserved entries are stored as NaN so they cannot leak into sums.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.mask is None:
            mask = np.isfinite(values)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise ShapeMismatch(f"mask shape {mask.shape} != values shape {values.shape}")
            mask = mask & np.isfinite(values)
        values = np.where(mask, values, np.nan)
        if np.any(values[mask] < 0):
            raise ValueError("transport plan entries must be nonnegative")
        object.__setattr__(self, "values", _frozen_array(values))
        object.__setattr__(self, "mask", _frozen_array(mask, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with unobserved entries replaced by ``fill``."""
        return np.where(self.mask, self.values, fill)


@dataclass(frozen=True)
class ScalingVectors:
    pi: np.ndarray
    omega: np.ndarray
    lambda_dual: np.ndarray
    eta_dual: np.ndarray

    @classmethod
    def from_log(cls, log_pi, log_omega, epsilon):
        with np.errstate(over="ignore"):
            return cls(
                pi=np.exp(log_pi),
                omega=np.exp(log_omega),
                lambda_dual=-epsilon * np.asarray(log_pi),
                eta_dual=-epsilon * np.asarray(log_omega),
            )

    def reconstruct(self, cost: CostMatrix) -> np.ndarray:
        """Rebuild ``diag(pi) exp(-C/eps) diag(omega)``."""
        return self.pi[:, None] * cost.kernel() * self.omega[None, :]

    def potentials(self) -> "DualPotentials":
        return DualPotentials(f=-self.lambda_dual, g=-self.eta_dual)


@dataclass(frozen=True)
class DualPotentials:
    f: np.ndarray
    g: np.ndarray


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 10_000
    tolerance: float = 1e-9
    log_domain: bool = True
    unroll_depth: int = 50

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.unroll_depth < 1:
            raise ValueError("unroll_depth must be >= 1")


@dataclass
class SinkhornResult:
    plan: TransportPlan
    scalings: ScalingVectors
    iterations: int
    residual: float
    converged: bool = field(default=True)

    def __iter__(self):
        # allows ``plan, scalings, iters, residual = sinkhorn(...)``
        return iter((self.plan, self.scalings, self.iterations, self.residual))


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _residuals(plan: np.ndarray, mu: np.ndarray, nu: np.ndarray):
    row = np.abs(plan.sum(axis=-1) - mu).sum(axis=-1)
    col = np.abs(plan.sum(axis=-2) - nu).sum(axis=-1)
    return row, col


def sinkhorn_batch(
    cost: np.ndarray,
    mu: np.ndarray,
    nu: np.ndarray,
    epsilon: float,
    max_iterations: int = 10_000,
    tolerance: float = 1e-9,
):
    """Log-domain Sinkhorn on a stack of problems.

    ``cost`` has shape (B, m, n), ``mu`` (B, m) and ``nu`` (B, n), each
    problem normalised to unit mass. Returns ``(log_pi, log_omega, plan,
    iterations, residual)`` with per-problem residuals; the loop stops once
    every problem is within ``tolerance``.
    """
    cost = np.asarray(cost, dtype=float)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    log_k = -cost / epsilon
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    log_pi = np.zeros(mu.shape)
    log_pi = np.where(mu > 0, log_pi, -np.inf)
    residual = np.full(mu.shape[0], np.inf)
    plan = None
    it = 0
    with np.errstate(invalid="ignore"):
        for it in range(1, max_iterations + 1):
            log_omega = log_nu - _lse(log_pi[..., :, None] + log_k, axis=-2)
            log_pi = log_mu - _lse(log_k + log_omega[..., None, :], axis=-1)
            plan = np.exp(log_pi[..., :, None] + log_k + log_omega[..., None, :])
            row, col = _residuals(plan, mu, nu)
            residual = np.maximum(row, col)
            if np.all(residual <= tolerance):
                break
    return log_pi, log_omega, plan, it, residual


def _sinkhorn_linear(kernel, mu, nu, max_iterations, tolerance):
    pi = (mu > 0).astype(float)
    plan = None
    residual = np.inf
    it = 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, max_iterations + 1):
            omega = np.where(nu > 0, nu / (kernel.T @ pi), 0.0)
            pi = np.where(mu > 0, mu / (kernel @ omega), 0.0)
            if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(omega))):
                raise NumericUnderflow(
                    "linear-domain scaling overflowed; enable log_domain or increase epsilon"
                )
            plan = pi[:, None] * kernel * omega[None, :]
            row, col = _residuals(plan, mu, nu)
            residual = max(row, col)
            if residual <= tolerance:
                break
    with np.errstate(divide="ignore"):
        return np.log(pi), np.log(omega), plan, it, residual


def sinkhorn(
    cost: CostMatrix,
    marginals: Marginals,
    opts: SolverOptions | None = None,
    strict: bool = True,
) -> SinkhornResult:
    """Solve the entropic OT problem for one cost matrix.

    The tolerance bounds the L1 marginal residual relative to the total
    mass (identical to the absolute residual for unit-mass marginals).
    Zero-mass rows and columns come back as zero rows and columns with
    ``pi = 0`` / ``omega = 0``.

    Raises NonConvergence when ``strict`` and the residual is still above
    tolerance after ``max_iterations``; NumericUnderflow when the
    linear-domain kernel has an all-zero row or column.
    """
    opts = opts or SolverOptions()
    m, n = marginals.shape
    if cost.shape != (m, n):
        raise ShapeMismatch(f"cost shape {cost.shape} does not match marginals {(m, n)}")
    total = marginals.total
    mu = marginals.mu / total
    nu = marginals.nu / total

    if opts.log_domain:
        log_pi, log_omega, plan, it, res = sinkhorn_batch(
            cost.values[None], mu[None], nu[None], cost.epsilon,
            opts.max_iterations, opts.tolerance,
        )
        log_pi, log_omega, plan, res = log_pi[0], log_omega[0], plan[0], float(res[0])
    else:
        kernel = cost.kernel()
        live_rows = kernel[:, nu > 0][mu > 0]
        if live_rows.size and (np.any(live_rows.sum(axis=1) == 0) or np.any(live_rows.sum(axis=0) == 0)):
            raise NumericUnderflow(
                f"exp(-C/eps) has an all-zero row or column at eps={cost.epsilon}; use log_domain"
            )
        log_pi, log_omega, plan, it, res = _sinkhorn_linear(
            kernel, mu, nu, opts.max_iterations, opts.tolerance
        )

    if not np.all(np.isfinite(plan)):
        raise NumericUnderflow("non-finite transport plan")
    converged = res <= opts.tolerance
    if strict and not converged:
        raise NonConvergence(
            f"Sinkhorn residual {res:.3e} above tolerance {opts.tolerance:.1e} "
            f"after {it} iterations (eps={cost.epsilon})",
            iterations=it,
            residual=res,
        )
    # pi absorbs the mass normalisation
    log_pi = log_pi + np.log(total)
    scalings = ScalingVectors.from_log(log_pi, log_omega, cost.epsilon)
    return SinkhornResult(
        plan=TransportPlan(plan * total),
        scalings=scalings,
        iterations=int(it),
        residual=float(res),
        converged=bool(converged),
    )


def entropic_objective(plan: TransportPlan, cost: CostMatrix) -> float:
    """``sum C*T + eps * sum T (log T - 1)`` with ``0 (log 0 - 1) = 0``."""
    t = plan.filled(0.0)
    if t.shape != cost.shape:
        raise ShapeMismatch(f"plan shape {t.shape} != cost shape {cost.shape}")
    pos = t > 0
    entropy = np.sum(t[pos] * (np.log(t[pos]) - 1.0))
    return float(np.sum(cost.values * t) + cost.epsilon * entropy)


def marginal_residual(plan: TransportPlan, marginals: Marginals) -> tuple[float, float]:
    t = plan.filled(0.0)
    if t.shape != marginals.shape:
        raise ShapeMismatch(f"plan shape {t.shape} != marginals {marginals.shape}")
    row, col = _residuals(t, marginals.mu, marginals.nu)
    return float(row), float(col)


def dual_objective(potentials: DualPotentials, marginals: Marginals) -> float:
    return float(np.dot(potentials.f, marginals.mu) + np.dot(potentials.g, marginals.nu))


def dual_feasible(potentials: DualPotentials, cost: CostMatrix) -> bool:
    f = np.asarray(potentials.f, dtype=float)
    g = np.asarray(potentials.g, dtype=float)
    if (f.size, g.size) != cost.shape:
        raise ShapeMismatch(f"potentials {(f.size, g.size)} do not match cost {cost.shape}")
    return bool(np.all(f[:, None] + g[None, :] <= cost.values + FEASIBILITY_SLACK))


def gauge_shift(cost: CostMatrix, a, b) -> CostMatrix:
    """Return ``C_ij + a_i + b_j``; the entropic plan is unchanged."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if (a.size, b.size) != cost.shape:
        raise ShapeMismatch(f"shifts {(a.size, b.size)} do not match cost {cost.shape}")
    return CostMatrix(cost.values + a[:, None] + b[None, :], cost.epsilon)


def gauge_normalize(values) -> np.ndarray:
    """Canonical representative of a cost modulo additive row/column shifts.

    Double-centres the matrix and adds ``1/n`` so that every row sums to one
    (columns then sum to ``m/n``). Two costs produce the same entropic plan
    for all marginals exactly when their normalised forms coincide.
    """
    c = np.asarray(values, dtype=float)
    n = c.shape[-1]
    centred = (
        c
        - c.mean(axis=-1, keepdims=True)
        - c.mean(axis=-2, keepdims=True)
        + c.mean(axis=(-2, -1), keepdims=True)
    )
    return centred + 1.0 / n


# --- differentiable fixed-depth solver -------------------------------------

def sinkhorn_unrolled(cost, mu, nu, epsilon: float, depth: int, log_domain: bool = True):
    """Run exactly ``depth`` Sinkhorn iterations in torch.

    ``cost`` (B, m, n), ``mu`` (B, m), ``nu`` (B, n) are tensors; gradients
    flow through every iteration. Marginals are used as given (no
    normalisation), so the returned plan is in the marginals' units. The
    linear-domain variant is faster but requires ``exp(-C/eps)`` to stay
    well inside the float range.
    """
    import torch

    if not log_domain:
        kernel = torch.exp(-cost / epsilon)
        pi = (mu > 0).to(cost.dtype)
        for _ in range(depth):
            omega = nu / (kernel.transpose(-2, -1) @ pi.unsqueeze(-1)).squeeze(-1)
            pi = mu / (kernel @ omega.unsqueeze(-1)).squeeze(-1)
        return pi.unsqueeze(-1) * kernel * omega.unsqueeze(-2)

    log_k = -cost / epsilon
    log_mu = torch.log(mu)
    log_nu = torch.log(nu)
    log_pi = torch.where(mu > 0, torch.zeros_like(mu), torch.full_like(mu, -torch.inf))
    for _ in range(depth):
        log_omega = log_nu - torch.logsumexp(log_pi.unsqueeze(-1) + log_k, dim=-2)
        log_pi = log_mu - torch.logsumexp(log_k + log_omega.unsqueeze(-2), dim=-1)
    log_plan = log_pi.unsqueeze(-1) + log_k + log_omega.unsqueeze(-2)
    return torch.exp(log_plan)
