"""Distribution families: log densities and reparameterized samplers.

All functions are stateless and take/return :class:`~sgvae.tensor.Tensor`
values with an explicit batch axis: inputs are [B, D], per-row log
probabilities come back as [B, 1]. Randomness always enters through
explicitly passed noise arrays, never from hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .tensor import Tensor, as_tensor

LOG_TWO_PI = float(np.log(2.0 * np.pi))

FAMILIES = ("diag-normal", "categorical", "bernoulli", "concrete")


@dataclass
class DistParams:
    """Parameters of one distribution node.

    diag-normal carries mean and log_std; the rest carry logits.
    concrete additionally carries a positive temperature.
    """

    family: str
    mean: Tensor | None = None
    log_std: Tensor | None = None
    logits: Tensor | None = None
    temperature: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown family {self.family!r}")
        if self.family == "diag-normal":
            if self.mean is None or self.log_std is None:
                raise ContractError("diag-normal needs mean and log_std")
            if self.mean.data.shape != self.log_std.data.shape:
                raise DimensionError(
                    f"mean {self.mean.data.shape} vs log_std {self.log_std.data.shape}")
        else:
            if self.logits is None:
                raise ContractError(f"{self.family} needs logits")
            if not np.all(np.isfinite(self.logits.data)):
                raise DomainError(f"{self.family} logits must be finite")
        if self.family == "concrete":
            if self.temperature is None or self.temperature <= 0.0:
                raise DomainError(f"concrete temperature must be > 0, got {self.temperature}")


def _require_2d(name: str, t: Tensor) -> Tensor:
    t = as_tensor(t)
    if t.data.ndim != 2:
        raise DimensionError(f"{name} must be 2-d [batch, dim], got {t.data.shape}")
    return t


def _same_shape(op: str, *ts: Tensor) -> None:
    shapes = {t.data.shape for t in ts}
    if len(shapes) > 1:
        raise DimensionError(f"{op}: operand shapes differ: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# diagonal Gaussian

def normal_log_prob(x: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """sum_d [ -0.5 log(2 pi) - log_std_d - 0.5 ((x_d - mean_d)/std_d)^2 ], per row."""
    x, mean, log_std = (_require_2d(n, t) for n, t in
                        [("x", x), ("mean", mean), ("log_std", log_std)])
    _same_shape("normal_log_prob", x, mean, log_std)
    z = T.mul(T.sub(x, mean), T.exp(T.negate(log_std)))
    per_dim = T.negate(T.add(T.add(log_std, T.scale(T.mul(z, z), 0.5)),
                             as_tensor(0.5 * LOG_TWO_PI)))
    return T.reduce_sum(per_dim, axis=1, keepdims=True)


def normal_rsample(mean: Tensor, log_std: Tensor, noise) -> Tensor:
    """mean + exp(log_std) * noise, exactly; gradient flows to mean/log_std only."""
    mean, log_std = _require_2d("mean", mean), _require_2d("log_std", log_std)
    eps = Tensor(np.asarray(noise, dtype=np.float64))  # constant: no grad to noise
    _same_shape("normal_rsample", mean, log_std, eps)
    return T.add(mean, T.mul(T.exp(log_std), eps))


def kl_normal_std(mean: Tensor, log_std: Tensor) -> Tensor:
    """Analytic KL(N(mean, diag exp(2 log_std)) || N(0, I)), per row."""
    mean, log_std = _require_2d("mean", mean), _require_2d("log_std", log_std)
    _same_shape("kl_normal_std", mean, log_std)
    var = T.exp(T.scale(log_std, 2.0))
    half = T.scale(T.add(T.add(T.mul(mean, mean), var), as_tensor(-1.0)), 0.5)
    return T.reduce_sum(T.sub(half, log_std), axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# categorical / concrete

def _check_rows_simplex(y: np.ndarray, op: str) -> None:
    if np.any(y < -1e-12) or np.any(y > 1.0 + 1e-12):
        raise ContractError(f"{op}: entries outside [0, 1]")
    if np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError(f"{op}: rows do not sum to 1")


def _check_rows_one_hot(y: np.ndarray, op: str) -> None:
    ones = np.abs(y - 1.0) < 1e-12
    zeros = np.abs(y) < 1e-12
    if not (np.all(ones | zeros) and np.all(ones.sum(axis=1) == 1)):
        raise ContractError(f"{op}: rows are not one-hot")


def categorical_log_prob(y: Tensor, logits: Tensor, allow_soft: bool = False) -> Tensor:
    """<y, log_softmax(logits)> per row.

    With one-hot ``y`` this is the exact categorical log mass. ``allow_soft``
    admits simplex-valued rows (relaxed samples scored as soft one-hots); the
    value reduces to the categorical mass in the one-hot limit and stays
    differentiable in both arguments.
    """
    y, logits = _require_2d("y", y), _require_2d("logits", logits)
    _same_shape("categorical_log_prob", y, logits)
    check = _check_rows_simplex if allow_soft else _check_rows_one_hot
    check(y.data, "categorical_log_prob")
    return T.reduce_sum(T.mul(y, T.log_softmax(logits, axis=1)), axis=1, keepdims=True)


def concrete_rsample(logits: Tensor, temperature: float, gumbel_noise) -> Tensor:
    """softmax((logits + gumbel)/temperature): a simplex point, differentiable
    in logits. gumbel_noise = -log(-log(u)) must be drawn externally."""
    if temperature <= 0.0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    logits = _require_2d("logits", logits)
    g = Tensor(np.asarray(gumbel_noise, dtype=np.float64))
    _same_shape("concrete_rsample", logits, g)
    return T.softmax(T.scale(T.add(logits, g), 1.0 / float(temperature)), axis=1)


def categorical_sample(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exact one-hot draws (no gradient); used for evaluation and generation."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-d, got {logits.shape}")
    g = -np.log(-np.log(np.clip(rng.random(logits.shape), 1e-300, None)))
    idx = np.argmax(logits + g, axis=1)
    out = np.zeros_like(logits)
    out[np.arange(logits.shape[0]), idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# Bernoulli (logits form)

def bernoulli_log_prob(x: Tensor, logits: Tensor) -> Tensor:
    """sum_d [x log sigmoid(l) + (1-x) log sigmoid(-l)], stable in logits form.

    ``x`` may be gray values in [0, 1] (binary cross-entropy against them).
    """
    x, logits = _require_2d("x", x), _require_2d("logits", logits)
    _same_shape("bernoulli_log_prob", x, logits)
    if np.any(x.data < 0.0) or np.any(x.data > 1.0):
        raise DomainError("bernoulli_log_prob: x entries outside [0, 1]")
    log_p1 = T.negate(T.softplus(T.negate(logits)))   # log sigmoid(l)
    log_p0 = T.negate(T.softplus(logits))             # log sigmoid(-l)
    one_minus_x = T.sub(as_tensor(np.ones_like(x.data)), x)
    per_dim = T.add(T.mul(x, log_p1), T.mul(one_minus_x, log_p0))
    return T.reduce_sum(per_dim, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# family dispatch used by the trace executor

def log_prob(value: Tensor, params: DistParams, soft_discrete: bool = False) -> Tensor:
    if params.family == "diag-normal":
        return normal_log_prob(value, params.mean, params.log_std)
    if params.family == "bernoulli":
        return bernoulli_log_prob(value, params.logits)
    if params.family in ("categorical", "concrete"):
        return categorical_log_prob(value, params.logits, allow_soft=soft_discrete)
    raise ContractError(f"no log_prob for family {params.family!r}")
