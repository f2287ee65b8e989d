"""Synthetic inputs shared by the unit and acceptance tests."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.optimize import minimize

from tradecost.data_ingest import CountryIndex, DualReport, TradePanel, marginals_from_plan
from tradecost.gravity import DENSE_NAMES, build_design
from tradecost.inverse_model import NetworkConfig, TrainingConfig, init_params, loss
from tradecost.ot_core import CostMatrix, Marginals, TransportPlan


def grid_oracle_2x2(cost, eps, n=200001):
    """Minimise the entropic objective over the one free entry of a 2x2 plan with uniform marginals."""
    a = np.linspace(1e-12, 0.5 - 1e-12, n)
    plans = np.stack([a, 0.5 - a, 0.5 - a, a], axis=1)
    obj = plans @ cost.ravel() + eps * np.sum(plans * (np.log(plans) - 1), axis=1)
    k = int(np.argmin(obj))
    # refine on a fine local grid
    lo, hi = a[max(k - 1, 0)], a[min(k + 1, n - 1)]
    a = np.linspace(lo, hi, n)
    plans = np.stack([a, 0.5 - a, 0.5 - a, a], axis=1)
    obj = plans @ cost.ravel() + eps * np.sum(plans * (np.log(plans) - 1), axis=1)
    return a[int(np.argmin(obj))]


def random_instance(rng, m=None, n=None, eps=None):
    m = m or int(rng.integers(2, 51))
    n = n or int(rng.integers(2, 51))
    eps = eps if eps is not None else float(rng.uniform(0.05, 1.0))
    mu = rng.uniform(0.1, 1.0, m)
    nu = rng.uniform(0.1, 1.0, n)
    nu *= mu.sum() / nu.sum()
    return CostMatrix(rng.random((m, n)), eps), Marginals(mu, nu)


def constrained_oracle(cost, mu, nu, eps):
    """Direct SLSQP minimisation of the entropic objective under marginal constraints."""
    m, n = cost.shape

    def f(x):
        t = np.clip(x, 1e-300, None)
        return float(np.sum(cost.ravel() * t) + eps * np.sum(t * (np.log(t) - 1)))

    def grad(x):
        return cost.ravel() + eps * np.log(np.clip(x, 1e-300, None))

    cons = [{"type": "eq", "fun": lambda x, i=i: x.reshape(m, n)[i].sum() - mu[i]} for i in range(m)]
    cons += [{"type": "eq", "fun": lambda x, j=j: x.reshape(m, n)[:, j].sum() - nu[j]} for j in range(n - 1)]
    x0 = np.outer(mu, nu).ravel() / mu.sum()
    res = minimize(f, x0, jac=grad, constraints=cons, bounds=[(1e-14, None)] * (m * n),
                   method="SLSQP", options={"ftol": 1e-15, "maxiter": 1000})
    return res.x.reshape(m, n)


def finite_difference(params, plan, marg, tc, h=1e-5):
    out = []
    arrays = params.arrays()
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (loss(params.with_arrays(plus), plan, marg, tc).total
                      - loss(params.with_arrays(minus), plan, marg, tc).total) / (2 * h)
        out.append(g)
    return out


def max_relative_error(ad, fd, floor=1e-6):
    a = np.concatenate([x.ravel() for x in ad])
    f = np.concatenate([x.ravel() for x in fd])
    return float(np.max(np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)))


def random_config(rng):
    m, n = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    k = m * n
    nc = NetworkConfig(k, k, layers=int(rng.integers(1, 4)), width=int(rng.integers(2, 6)), seed=int(rng.integers(1 << 30)))
    vals = rng.uniform(0.5, 5.0, (m, n))
    mask = rng.random((m, n)) < 0.85
    mask[:, 0] = True
    mask[0, :] = True
    plan = TransportPlan(vals, mask)
    params = init_params(nc, input_scale=5.0)
    # move biases off zero so the penalty is away from its kink
    params = params.with_arrays([*params.weights, *(rng.normal(0, 0.5, b.shape) for b in params.biases)])
    tc = TrainingConfig(epsilon=float(rng.uniform(0.3, 1.0)), unroll_depth=int(rng.integers(1, 11)))
    return params, plan, marginals_from_plan(plan), tc


LAMBDA_STAR = np.array([0.8, 0.6, -0.9, 0.5, 0.3, 0.2, 0.4, 1.0, -1.5])


def gravity_tables(n_countries=20, years=5, seed=0):
    """Random covariate tables and a fully observed placeholder panel."""
    rng = np.random.default_rng(seed)
    names = [f"K{i:02d}" for i in range(n_countries)]
    yrs = list(range(2000, 2000 + years))
    xy = rng.uniform(0, 5000, size=(n_countries, 2))
    dist = np.linalg.norm(xy[:, None] - xy[None], axis=-1) + 50.0
    contig = (dist < 1000).astype(int)
    colony = rng.random((n_countries, n_countries)) < 0.1
    comlang = rng.random((n_countries, n_countries)) < 0.25
    bilateral, countries = {}, {}
    for t in yrs:
        rta = rng.random((n_countries, n_countries)) < 0.3
        tariff = np.where(rta, 0.0, rng.uniform(0, 0.3, (n_countries, n_countries)))
        for a, ea in enumerate(names):
            countries[(t, ea)] = {"output": float(rng.lognormal(3, 1)), "expenditure": float(rng.lognormal(3, 1))}
            for b, eb in enumerate(names):
                bilateral[(t, ea, eb)] = {
                    "dist_km": float(dist[a, b]), "contig": int(contig[a, b]), "colony": int(colony[a, b]),
                    "comlang": int(comlang[a, b]), "rta": int(rta[a, b]), "tariff": float(tariff[a, b]),
                }
    k = n_countries + 1
    reports = []
    for t in yrs:
        vals = np.ones((k, k))
        mask = np.zeros((k, k), dtype=bool)
        mask[:-1, :-1] = True
        vals[~mask] = np.nan
        plan = TransportPlan(vals, mask)
        reports.append(DualReport(plan, plan, t))
    panel = TradePanel(CountryIndex(tuple(names), 1.0), yrs, reports)
    # countries table needs the pooled aggregate too; it never trades
    for t in yrs:
        countries[(t, "Other")] = {"output": 1.0, "expenditure": 1.0}
    return panel, bilateral, countries


def gravity_replication(panel, bilateral, countries, rng, lam=LAMBDA_STAR, fe_sd=0.5):
    """Design with Poisson flows drawn around known coefficients.

    Returns ``(design, beta_star, true_means)``.
    """
    design = build_design(panel, bilateral, countries)
    assert list(design.dense_names) == list(DENSE_NAMES)
    fe_rng = np.random.default_rng(12345)
    beta = np.concatenate([lam, fe_rng.normal(0.0, fe_sd, design.fe.shape[1])])
    mu = np.exp(design.X @ beta)
    y = rng.poisson(mu).astype(float)
    return dataclasses.replace(design, y=y), beta, mu
