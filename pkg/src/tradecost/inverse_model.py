"""Neural inverse map from observed transport plans to cost matrices.

The network is a tanh MLP with a sigmoid output layer. Training pushes the
predicted cost through a fixed number of Sinkhorn iterations and compares
the resulting plan with the observation on positive, observed links; an
L1 penalty on the cost row sums fixes the additive gauge.

Parameters are stored as float64 numpy arrays; torch is used only to obtain
reverse-mode gradients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data_ingest import TradePanel, marginals_from_plan
from .errors import EmptyPanel, NonFiniteGradient, ShapeMismatch
from .ot_core import CostMatrix, Marginals, TransportPlan, sinkhorn_unrolled

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class NetworkConfig:
    """MLP shape. ``layers`` counts affine maps: ``layers - 1`` tanh hidden
    layers of ``width`` units followed by a sigmoid output layer."""

    input_dim: int
    output_dim: int
    layers: int = 5
    width: int = 60
    hidden_activation: str = "tanh"
    output_activation: str = "sigmoid"
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.width < 1:
            raise ValueError("layers and width must be positive")
        if self.hidden_activation != "tanh" or self.output_activation != "sigmoid":
            raise ValueError("only tanh hidden and sigmoid output activations are supported")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [self.width] * (self.layers - 1) + [self.output_dim]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


@dataclass
class MlpParameters:
    config: NetworkConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    adam_state: AdamState
    input_scale: float = 1.0

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def with_arrays(self, arrays: Sequence[np.ndarray], adam_state: AdamState | None = None) -> "MlpParameters":
        k = len(self.weights)
        return replace(
            self,
            weights=[np.array(a) for a in arrays[:k]],
            biases=[np.array(a) for a in arrays[k:]],
            adam_state=adam_state if adam_state is not None else self.adam_state,
        )

    def to_dict(self) -> dict:
        return {
            "config": self.config.__dict__,
            "input_scale": self.input_scale,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "adam": {
                "step": self.adam_state.step,
                "m": [a.tolist() for a in self.adam_state.m],
                "v": [a.tolist() for a in self.adam_state.v],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParameters":
        nc = NetworkConfig(**d["config"])
        sizes = nc.sizes
        weights = [np.array(w, dtype=float).reshape(sizes[k], sizes[k + 1]) for k, w in enumerate(d["weights"])]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        shapes = [a.shape for a in (*weights, *biases)]
        adam = AdamState(
            m=[np.array(a, dtype=float).reshape(s) for a, s in zip(d["adam"]["m"], shapes)],
            v=[np.array(a, dtype=float).reshape(s) for a, s in zip(d["adam"]["v"], shapes)],
            step=int(d["adam"]["step"]),
        )
        return cls(nc, weights, biases, adam, float(d["input_scale"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MlpParameters":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_params(nc: NetworkConfig, input_scale: float = 1.0) -> MlpParameters:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, seeded by ``nc.seed``."""
    rng = np.random.default_rng(nc.seed)
    sizes = nc.sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    arrays = [*weights, *biases]
    adam = AdamState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)
    return MlpParameters(nc, weights, biases, adam, float(input_scale))


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 2
    epochs: int = 5000
    epsilon: float = 0.1
    unroll_depth: int = 50
    penalty_weight: float = 1.0
    input_transform: str = "log1p_scaled"
    flow_scale: float | None = None
    patience: int = 200
    min_rel_improvement: float = 1e-6
    final_learning_rate: float | None = None

    def lr_at(self, epoch: int) -> float:
        """Geometric interpolation to ``final_learning_rate`` over the epochs."""
        if self.final_learning_rate is None or self.epochs == 1:
            return self.learning_rate
        frac = (epoch - 1) / (self.epochs - 1)
        return self.learning_rate * (self.final_learning_rate / self.learning_rate) ** frac

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.unroll_depth < 1:
            raise ValueError("batch_size, epochs and unroll_depth must be >= 1")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be nonnegative")
        if self.final_learning_rate is not None and not self.final_learning_rate > 0:
            raise ValueError("final_learning_rate must be positive")
        if self.input_transform != "log1p_scaled":
            raise ValueError(f"unknown input transform {self.input_transform!r}")


@dataclass(frozen=True)
class LossReport:
    data_term: float
    penalty_term: float
    total: float


def encode_plans(plans: np.ndarray, input_scale: float) -> np.ndarray:
    """log(1+T) / log(1+scale), flattened row-major; NaN (masked) becomes 0."""
    t = np.nan_to_num(np.asarray(plans, dtype=float), nan=0.0)
    x = np.log1p(t) / math.log1p(input_scale)
    return x.reshape(x.shape[0], -1)


def _torch_arrays(params: MlpParameters, requires_grad: bool = False) -> list[torch.Tensor]:
    out = []
    for a in params.arrays():
        t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))
        if requires_grad:
            t = t.clone().requires_grad_(True)
        out.append(t)
    return out


def _mlp(x: torch.Tensor, arrays: list[torch.Tensor], n_layers: int) -> torch.Tensor:
    weights, biases = arrays[:n_layers], arrays[n_layers:]
    h = x
    for w, b in zip(weights[:-1], biases[:-1]):
        h = torch.tanh(h @ w + b)
    return torch.sigmoid(h @ weights[-1] + biases[-1])


def _check_shape(params: MlpParameters, shape: tuple[int, int]) -> None:
    if shape[0] * shape[1] != params.config.input_dim or shape[0] * shape[1] != params.config.output_dim:
        raise ShapeMismatch(
            f"plan shape {shape} incompatible with network dims "
            f"{params.config.input_dim}->{params.config.output_dim}"
        )


def forward_batch(params: MlpParameters, plans: np.ndarray) -> np.ndarray:
    """Costs for a stack of plans (B, m, n) with NaN marking masked entries."""
    plans = np.asarray(plans, dtype=float)
    _check_shape(params, plans.shape[1:])
    x = torch.from_numpy(encode_plans(plans, params.input_scale))
    with torch.no_grad():
        c = _mlp(x, _torch_arrays(params), len(params.weights))
    return c.numpy().reshape(plans.shape)


def forward(params: MlpParameters, plan: TransportPlan, epsilon: float = 0.1) -> CostMatrix:
    values = np.where(plan.mask, plan.values, np.nan)
    return CostMatrix(forward_batch(params, values[None])[0], epsilon)


@dataclass
class _Batch:
    inputs: torch.Tensor
    targets: torch.Tensor
    weights: torch.Tensor
    mu: torch.Tensor
    nu: torch.Tensor


def _make_batch(plans: Sequence[TransportPlan], marginals: Sequence[Marginals], input_scale: float, flow_scale: float) -> _Batch:
    vals = np.stack([np.where(p.mask, p.values, np.nan) for p in plans])
    filled = np.nan_to_num(vals, nan=0.0)
    observed = np.stack([p.mask for p in plans]) & (filled > 0)
    return _Batch(
        inputs=torch.from_numpy(encode_plans(vals, input_scale)),
        targets=torch.from_numpy(filled / flow_scale),
        weights=torch.from_numpy(observed.astype(float)),
        mu=torch.from_numpy(np.stack([mg.mu for mg in marginals]) / flow_scale),
        nu=torch.from_numpy(np.stack([mg.nu for mg in marginals]) / flow_scale),
    )


def _batch_terms(arrays, n_layers, batch: _Batch, epsilon, depth):
    b, m, n = batch.targets.shape
    cost = _mlp(batch.inputs, arrays, n_layers).reshape(b, m, n)
    t_hat = sinkhorn_unrolled(cost, batch.mu, batch.nu, epsilon, depth)
    data = ((t_hat - batch.targets) ** 2 * batch.weights).sum(dim=(-2, -1))
    penalty = (cost.sum(dim=-1) - 1.0).abs().sum(dim=-1)
    return data, penalty


def _flow_scale(tc: TrainingConfig, plans: Sequence[TransportPlan]) -> float:
    if tc.flow_scale is not None:
        return float(tc.flow_scale)
    return mean_positive_flow(plans)


def mean_positive_flow(plans: Sequence[TransportPlan]) -> float:
    vals = np.concatenate([p.values[p.mask & (np.nan_to_num(p.values) > 0)] for p in plans])
    return float(vals.mean()) if vals.size else 1.0


def loss(
    params: MlpParameters,
    plan_observed: TransportPlan,
    marginals: Marginals,
    tc: TrainingConfig,
) -> LossReport:
    """Data misfit on positive observed links plus row-sum penalty.

    ``data_term`` is measured in units of ``tc.flow_scale`` squared (the
    sample's mean positive flow when unset).
    """
    _check_shape(params, plan_observed.shape)
    scale = _flow_scale(tc, [plan_observed])
    batch = _make_batch([plan_observed], [marginals], params.input_scale, scale)
    with torch.no_grad():
        data, penalty = _batch_terms(_torch_arrays(params), len(params.weights), batch, tc.epsilon, tc.unroll_depth)
    d, p = float(data[0]), float(penalty[0])
    return LossReport(d, p, d + tc.penalty_weight * p)


def loss_from_cost(
    cost: np.ndarray,
    plan_observed: TransportPlan,
    marginals: Marginals,
    tc: TrainingConfig,
) -> LossReport:
    """Same loss with the network bypassed: ``cost`` is used as its output."""
    scale = _flow_scale(tc, [plan_observed])
    batch = _make_batch([plan_observed], [marginals], 1.0, scale)
    c = torch.from_numpy(np.asarray(cost, dtype=float))[None]
    with torch.no_grad():
        t_hat = sinkhorn_unrolled(c, batch.mu, batch.nu, tc.epsilon, tc.unroll_depth)
        d = float(((t_hat - batch.targets) ** 2 * batch.weights).sum())
        p = float((c.sum(dim=-1) - 1.0).abs().sum())
    return LossReport(d, p, d + tc.penalty_weight * p)


def _grad_batch(params: MlpParameters, batch: _Batch, tc: TrainingConfig):
    arrays = _torch_arrays(params, requires_grad=True)
    data, penalty = _batch_terms(arrays, len(params.weights), batch, tc.epsilon, tc.unroll_depth)
    total = (data + tc.penalty_weight * penalty).mean()
    grads = torch.autograd.grad(total, arrays)
    out = [g.numpy().copy() for g in grads]
    if not all(np.all(np.isfinite(g)) for g in out):
        raise NonFiniteGradient(
            f"non-finite gradient (epsilon={tc.epsilon}); reduce learning rate or increase epsilon"
        )
    return out, float(data.detach().mean()), float(penalty.detach().mean()), float(total.detach())


def gradient(
    params: MlpParameters,
    plan_observed: TransportPlan,
    marginals: Marginals,
    tc: TrainingConfig,
) -> list[np.ndarray]:
    """Reverse-mode gradient of the loss, ordered as ``params.arrays()``."""
    _check_shape(params, plan_observed.shape)
    batch = _make_batch([plan_observed], [marginals], params.input_scale, _flow_scale(tc, [plan_observed]))
    grads, *_ = _grad_batch(params, batch, tc)
    return grads


def adam_step(params: MlpParameters, gradients: Sequence[np.ndarray], learning_rate: float) -> MlpParameters:
    state = params.adam_state
    t = state.step + 1
    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), gradients, state.m, state.v):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new_arrays.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_arrays, AdamState(new_m, new_v, t))


@dataclass
class TrainingHistory:
    epochs: list[int] = field(default_factory=list)
    data_term: list[float] = field(default_factory=list)
    penalty_term: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    stopped_early: bool = False
    flow_scale: float = 1.0

    def append(self, epoch, data, penalty, total):
        self.epochs.append(epoch)
        self.data_term.append(data)
        self.penalty_term.append(penalty)
        self.total.append(total)

    def rows(self):
        return zip(self.epochs, self.data_term, self.penalty_term, self.total)


def training_samples(panel: TradePanel):
    """Both reporter views of every year: ``2 * len(panel)`` samples."""
    plans, marginals, keys = [], [], []
    for rep in panel.reports:
        for view, plan in rep.views().items():
            plans.append(plan)
            marginals.append(marginals_from_plan(plan))
            keys.append((rep.year, view))
    return plans, marginals, keys


def train(
    panel: TradePanel,
    nc: NetworkConfig,
    tc: TrainingConfig,
    params: MlpParameters | None = None,
    callback=None,
) -> tuple[MlpParameters, TrainingHistory]:
    """Fit one network to every (year, reporter) plan of the panel.

    Each epoch shuffles the samples (seeded by ``nc.seed``) and takes one
    Adam step per batch. Training stops after ``tc.epochs`` or when the
    best epoch loss has not improved by ``tc.min_rel_improvement``
    (relative) for ``tc.patience`` epochs.
    """
    if len(panel) == 0:
        raise EmptyPanel("panel has no years")
    plans, marginals, _ = training_samples(panel)
    k = len(panel.country_index)
    if nc.input_dim != k * k or nc.output_dim != k * k:
        raise ShapeMismatch(f"network dims {nc.input_dim}->{nc.output_dim} do not match {k}x{k} plans")
    scale = _flow_scale(tc, plans)
    if params is None:
        input_scale = max(float(np.nanmax(np.where(p.mask, p.values, np.nan))) for p in plans if p.mask.any())
        params = init_params(nc, input_scale=max(input_scale, 1.0))
    full = _make_batch(plans, marginals, params.input_scale, scale)
    rng = np.random.default_rng(nc.seed)
    n_samples = len(plans)
    history = TrainingHistory(flow_scale=scale)
    best = math.inf
    best_epoch = 0
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n_samples)
        d_sum = p_sum = 0.0
        for start in range(0, n_samples, tc.batch_size):
            idx = torch.from_numpy(np.sort(order[start:start + tc.batch_size]))
            batch = _Batch(*(getattr(full, f)[idx] for f in ("inputs", "targets", "weights", "mu", "nu")))
            grads, d, p, _ = _grad_batch(params, batch, tc)
            params = adam_step(params, grads, tc.lr_at(epoch))
            d_sum += d * len(idx)
            p_sum += p * len(idx)
        d_mean, p_mean = d_sum / n_samples, p_sum / n_samples
        total = d_mean + tc.penalty_weight * p_mean
        history.append(epoch, d_mean, p_mean, total)
        if callback is not None:
            callback(epoch, total)
        if total < best * (1 - tc.min_rel_improvement):
            best, best_epoch = total, epoch
        elif epoch - best_epoch >= tc.patience:
            history.stopped_early = True
            log.info("early stop at epoch %d (best %.3e at %d)", epoch, best, best_epoch)
            break
    return params, history


def infer_costs(
    params: MlpParameters,
    panel: TradePanel,
    epsilon: float = 0.1,
    views: Sequence[str] = ("exporter", "importer"),
) -> dict[tuple[int, str], CostMatrix]:
    """Cost matrix per (year, reporter view)."""
    k = len(panel.country_index)
    _check_shape(params, (k, k))
    keys, stack = [], []
    for rep in panel.reports:
        plans = rep.views()
        for view in views:
            plan = plans[view]
            keys.append((rep.year, view))
            stack.append(np.where(plan.mask, plan.values, np.nan))
    costs = forward_batch(params, np.stack(stack))
    return {key: CostMatrix(c, epsilon) for key, c in zip(keys, costs)}


def train_per_year(
    panel: TradePanel,
    nc: NetworkConfig,
    tc: TrainingConfig,
) -> dict[int, tuple[MlpParameters, TrainingHistory]]:
    """Ablation: a separate network for each year, trained on its two views."""
    out = {}
    for year, rep in zip(panel.years, panel.reports):
        sub = TradePanel(panel.country_index, [year], [rep], panel.provenance)
        out[year] = train(sub, nc, tc)
    return out
