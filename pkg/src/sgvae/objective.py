"""Training objectives: the unsupervised ELBO, the self-normalized supervised
estimator, its importance-weighted variant, and their weighted combination.

Every estimator takes S traces sharing one batch of data points and returns a
[B, 1] tensor of per-data-point values (a scalar when B = 1). Each also has a
``*_from_logs`` twin taking pre-stacked [B, S] log tensors; the trace form is
a thin stacking wrapper, so both paths run the same arithmetic.

The supervised estimator self-normalizes the importance weights per data
point: Z is the sample mean of w over the S traces, computed in log space,
and the weights stay attached to the gradient tape unless explicitly
detached (an ablation flag, not the default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dist
from . import tensor as T
from .errors import ContractError, DomainError
from .model import ExecutionPlan, Trace
from .tensor import Tensor

VARIANTS = ("snis", "iwae")


@dataclass
class ObjectiveConfig:
    """Estimator settings: sample count, term weights, and variant."""

    samples: int = 8                  # S traces per data point
    alpha: float = 1.0                # extra weight on the label-likelihood term
    gamma: float = 1.0                # weight of the supervised term in the total
    variant: str = "snis"
    analytic_kl: bool = False         # Gaussian leaves via closed-form KL
    temperature: float = 0.66         # concrete relaxation, fixed through training
    straight_through: bool = False
    detach_weights: bool = False
    eval_samples: int = 100

    def __post_init__(self):
        if self.samples < 1:
            raise ContractError(f"samples must be >= 1, got {self.samples}")
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.gamma <= 0:
            raise ContractError(f"gamma must be > 0, got {self.gamma}")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.temperature <= 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}")


# ---------------------------------------------------------------------------
# stacking helpers

def _stack(columns: Sequence[Tensor]) -> Tensor:
    """S per-trace [B, 1] columns -> one [B, S] tensor."""
    return columns[0] if len(columns) == 1 else T.concat(list(columns), axis=1)


def stack_trace_logs(traces: Sequence[Trace]) -> tuple[Tensor, Tensor, Tensor]:
    """(log p, log q, log w), each [B, S], from S traces of one batch."""
    if not traces:
        raise ContractError("need at least one trace")
    log_p = _stack([t.log_joint_p() for t in traces])
    log_q = _stack([t.log_joint_q() for t in traces])
    log_w = _stack([t.log_w for t in traces])
    return log_p, log_q, log_w


def _require_supplied(traces: Sequence[Trace]) -> None:
    supplied = {t.supplied for t in traces}
    if len(supplied) != 1 or not next(iter(supplied)):
        raise ContractError("supervised estimators need the same supplied "
                            "labels in every trace")


def _require_unsupplied(traces: Sequence[Trace]) -> None:
    if any(t.supplied for t in traces):
        raise ContractError("the unsupervised bound rejects traces with supplied labels")


# ---------------------------------------------------------------------------
# unsupervised bound

def elbo_unsupervised(traces: Sequence[Trace],
                      analytic_kl_for: Sequence[str] = ()) -> Tensor:
    """(1/S) sum_s [log p_s - log q_s], per data point.

    ``analytic_kl_for`` names Gaussian leaf variables (standard-normal prior,
    recognition parents all observed) whose sampled prior/entropy terms are
    replaced by the closed-form KL, computed once from the shared recognition
    parameters.
    """
    _require_unsupplied(traces)
    log_p, log_q = stack_trace_logs(traces)[:2]
    gap = T.sub(log_p, log_q)
    if analytic_kl_for:
        corrections = []
        for s, trace in enumerate(traces):
            per = None
            for name in analytic_kl_for:
                delta = T.sub(trace.rec_logp[name], trace.gen_logp[name])
                per = delta if per is None else T.add(per, delta)
            corrections.append(per)
        gap = T.add(gap, _stack(corrections))
        value = T.mean(gap, axis=1, keepdims=True)
        for name in analytic_kl_for:
            dp = traces[0].rec_params[name]
            value = T.sub(value, dist.kl_normal_std(dp.mean, dp.log_std))
        return value
    return T.mean(gap, axis=1, keepdims=True)


def analytic_kl_vars(plan: ExecutionPlan) -> tuple[str, ...]:
    """Gaussian latents eligible for the closed-form KL path: standard-normal
    constant prior and recognition parents all observed (plain-VAE shape)."""
    out = []
    for spec in plan.graph.variables:
        if (spec.supervision == "latent" and spec.family == "diag-normal"
                and spec.eta.kind == "constant"
                and all(v == 0.0 for v in spec.eta.value)
                and spec.recognition_parents
                and all(plan.graph.spec(p).supervision == "observed"
                        for p in spec.recognition_parents)):
            out.append(spec.name)
    return tuple(out)


# ---------------------------------------------------------------------------
# supervised estimators

def _log_mean_w(log_w: Tensor) -> Tensor:
    s = log_w.data.shape[1]
    return T.add(T.log_sum_exp(log_w, axis=1, keepdims=True),
                 T.as_tensor(-math.log(s)))


def snis_expectation_from_logs(log_p: Tensor, log_q: Tensor, log_w: Tensor,
                               detach_weights: bool = False) -> Tensor:
    """(1/S) sum_s (w_s / Z) log(p_s / q_s): the self-normalized conditional
    expectation, with Z the in-sample mean weight (log-space throughout)."""
    log_z = _log_mean_w(log_w)
    if log_z.data.size > 1:
        log_z = T.expand_cols(log_z, log_w.data.shape[1])
    norm_w = T.exp(T.sub(log_w, log_z))
    if detach_weights:
        norm_w = T.stop_gradient(norm_w)
    ratio = T.sub(log_p, log_q)
    return T.mean(T.mul(norm_w, ratio), axis=1, keepdims=True)


def supervised_estimator_from_logs(log_p: Tensor, log_q: Tensor, log_w: Tensor,
                                   alpha: float, detach_weights: bool = False) -> Tensor:
    """Self-normalized supervised objective:
    (1/S) sum_s [(w_s/Z) log(p_s/q_s) + (1 + alpha) log w_s]."""
    expectation = snis_expectation_from_logs(log_p, log_q, log_w, detach_weights)
    bound = T.mean(log_w, axis=1, keepdims=True)
    return T.add(expectation, T.scale(bound, 1.0 + float(alpha)))


def log_marginal_bound_from_logs(log_w: Tensor) -> Tensor:
    """(1/S) sum_s log w_s: lower-bounds the label marginal log q(y|x)."""
    return T.mean(log_w, axis=1, keepdims=True)


def supervised_iwae_from_logs(log_p: Tensor, log_q: Tensor, log_w: Tensor,
                              alpha: float) -> Tensor:
    """log[(1/S) sum_s p_s/q_s^prop] + alpha log[(1/S) sum_s w_s], where the
    proposal density covers only the unsupplied variables: log q^prop =
    log q - log w."""
    s = log_p.data.shape[1]
    first = T.add(T.log_sum_exp(T.add(T.sub(log_p, log_q), log_w), axis=1, keepdims=True),
                  T.as_tensor(-math.log(s)))
    second = T.scale(_log_mean_w(log_w), float(alpha))
    return T.add(first, second)


def snis_expectation(traces: Sequence[Trace], detach_weights: bool = False) -> Tensor:
    _require_supplied(traces)
    log_p, log_q, log_w = stack_trace_logs(traces)
    return snis_expectation_from_logs(log_p, log_q, log_w, detach_weights)


def supervised_estimator(traces: Sequence[Trace], alpha: float,
                         detach_weights: bool = False) -> Tensor:
    _require_supplied(traces)
    log_p, log_q, log_w = stack_trace_logs(traces)
    return supervised_estimator_from_logs(log_p, log_q, log_w, alpha, detach_weights)


def log_marginal_bound(traces: Sequence[Trace]) -> Tensor:
    _require_supplied(traces)
    return log_marginal_bound_from_logs(stack_trace_logs(traces)[2])


def supervised_iwae(traces: Sequence[Trace], alpha: float) -> Tensor:
    _require_supplied(traces)
    log_p, log_q, log_w = stack_trace_logs(traces)
    return supervised_iwae_from_logs(log_p, log_q, log_w, alpha)


def normalized_weights(traces: Sequence[Trace]) -> np.ndarray:
    """w_s / Z per data point, [B, S]; averages to 1 along the sample axis."""
    log_w = stack_trace_logs(traces)[2]
    log_z = _log_mean_w(log_w)
    return np.exp(log_w.data - log_z.data)


# ---------------------------------------------------------------------------
# combination and supervision-rate bookkeeping

def combined_objective(unsup_values: Tensor | None, sup_values: Tensor | None,
                       gamma: float, n_scale: float | None = None,
                       m_scale: float | None = None) -> Tensor:
    """Total objective: sum(unsup) + gamma * sum(sup).

    With ``n_scale``/``m_scale`` given, each batch contributes its mean scaled
    by the full dataset size, so a mini-batch step estimates the full-data
    objective and the supervision rate gamma*M/(N + gamma*M) is exact.
    """
    if gamma <= 0:
        raise ContractError(f"gamma must be > 0, got {gamma}")
    total = None
    if unsup_values is not None and unsup_values.data.size:
        u = T.scale(T.mean(unsup_values), float(n_scale)) if n_scale is not None \
            else T.reduce_sum(unsup_values)
        total = u
    if sup_values is not None and sup_values.data.size:
        s = T.scale(T.mean(sup_values), float(m_scale)) if m_scale is not None \
            else T.reduce_sum(sup_values)
        s = T.scale(s, float(gamma))
        total = s if total is None else T.add(total, s)
    if total is None:
        raise ContractError("combined_objective needs at least one non-empty term")
    return total


def supervision_rate(n_unsup: int, m_sup: int, gamma: float) -> float:
    """rho = gamma*M / (N + gamma*M): relative weight of the supervised term."""
    if n_unsup < 0 or m_sup < 0:
        raise DomainError("dataset sizes must be non-negative")
    if n_unsup == 0 and m_sup == 0:
        raise DomainError("supervision rate undefined for empty data")
    if gamma <= 0:
        raise DomainError(f"gamma must be > 0, got {gamma}")
    return gamma * m_sup / (n_unsup + gamma * m_sup)


def alpha_for_rate(rho: float) -> float:
    """The default label-term weight alpha = 0.1 / rho."""
    if rho <= 0:
        raise DomainError(f"rho must be > 0, got {rho}")
    return 0.1 / rho
