"""Declarative graphical-model specs, compilation, and trace execution.

A model is a list of :class:`VariableSpec`: each random variable names its
distribution family, its parents in the generative and recognition graphs,
and a parameter function (a constant or an MLP over the concatenated parent
values) for each side. :func:`define_model` validates the two DAGs,
:func:`compile_model` fixes topological orders and materializes MLP
parameters, and :func:`run_trace` executes one stochastic forward pass:
recognition sampling (supplied labels clamp their variables and contribute
their recognition log probability to the log importance weight), then
generative scoring of every variable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import dist
from . import tensor as T
from .dist import DistParams
from .errors import (ContractError, CycleError, DimensionError,
                     ParentReferenceError)
from .tensor import Tensor, as_tensor

SUPERVISION_KINDS = ("observed", "latent", "partial")
ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "softplus": T.softplus}

DEFAULT_TEMPERATURE = 0.66


@dataclass(frozen=True)
class FuncSpec:
    """A parameter function: a fixed constant vector or an MLP descriptor."""

    kind: str = "mlp"                       # 'constant' | 'mlp'
    value: tuple[float, ...] | None = None  # constant: raw parameter outputs
    hidden: tuple[int, ...] = (256,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("constant", "mlp"):
            raise ContractError(f"unknown parameter-function kind {self.kind!r}")
        if self.kind == "constant" and self.value is None:
            raise ContractError("constant parameter function needs a value")
        if self.kind == "mlp" and self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class VariableSpec:
    name: str
    family: str                       # 'diag-normal' | 'categorical' | 'bernoulli'
    shape: tuple[int, ...]
    supervision: str                  # 'observed' | 'latent' | 'partial'
    generative_parents: tuple[str, ...] = ()
    recognition_parents: tuple[str, ...] = ()
    eta: FuncSpec | None = None       # generative parameter function
    lam: FuncSpec | None = None       # recognition parameter function

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def param_dim(self) -> int:
        """Raw outputs of a parameter function for this family."""
        return 2 * self.dim if self.family == "diag-normal" else self.dim


def _default_prior(spec: VariableSpec) -> FuncSpec:
    # standard normal for Gaussians, uniform logits for discretes
    return FuncSpec(kind="constant", value=tuple([0.0] * spec.param_dim))


@dataclass(frozen=True)
class ModelGraph:
    variables: tuple[VariableSpec, ...]
    index: Mapping[str, int]

    def spec(self, name: str) -> VariableSpec:
        return self.variables[self.index[name]]

    @property
    def observed(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.supervision == "observed")

    @property
    def partial(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.supervision == "partial")

    @property
    def latent(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.supervision == "latent")


def _toposort(names: list[str], edges: dict[str, tuple[str, ...]], kind: str) -> list[str]:
    """Kahn's algorithm, ties broken by declaration order; names a cycle on failure."""
    order_of = {n: i for i, n in enumerate(names)}
    indeg = {n: 0 for n in names}
    children: dict[str, list[str]] = {n: [] for n in names}
    for child, parents in edges.items():
        for p in parents:
            children[p].append(child)
            indeg[child] += 1
    ready = sorted([n for n in names if indeg[n] == 0], key=order_of.get)
    out: list[str] = []
    while ready:
        n = ready.pop(0)
        out.append(n)
        changed = False
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
                changed = True
        if changed:
            ready.sort(key=order_of.get)
    if len(out) != len(names):
        cycle = _find_cycle(edges, set(names) - set(out))
        raise CycleError(f"{kind} edges contain a cycle: {' -> '.join(cycle)}")
    return out


def _find_cycle(edges: dict[str, tuple[str, ...]], candidates: set[str]) -> list[str]:
    start = sorted(candidates)[0]
    seen: list[str] = []
    node = start
    while node not in seen:
        seen.append(node)
        node = next(p for p in edges.get(node, ()) if p in candidates)
    cycle = seen[seen.index(node):] + [node]
    return cycle


def define_model(specs: Sequence[VariableSpec]) -> ModelGraph:
    """Validate variable specs and return an immutable model graph."""
    if not specs:
        raise ContractError("a model needs at least one variable")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ContractError(f"duplicate variable names in {names}")
    declared = set(names)
    normalized: list[VariableSpec] = []
    for s in specs:
        if s.supervision not in SUPERVISION_KINDS:
            raise ContractError(f"{s.name}: unknown supervision {s.supervision!r}")
        if s.family not in ("diag-normal", "categorical", "bernoulli"):
            raise ContractError(f"{s.name}: unsupported family {s.family!r}")
        for p in s.generative_parents + s.recognition_parents:
            if p not in declared:
                raise ParentReferenceError(f"{s.name}: undeclared parent {p!r}")
        if s.supervision == "observed":
            if s.lam is not None:
                raise ContractError(f"{s.name}: observed variables take no recognition function")
            if s.recognition_parents:
                raise ContractError(f"{s.name}: observed variables take no recognition parents")
        else:
            if s.lam is None:
                raise ContractError(f"{s.name}: non-observed variables need a recognition function")
        if s.supervision == "partial" and s.family != "categorical":
            raise ContractError(f"{s.name}: partial supervision requires a categorical variable")
        eta = s.eta if s.eta is not None else _default_prior(s)
        if eta.kind == "constant" and s.generative_parents:
            raise ContractError(f"{s.name}: constant generative function cannot take parents")
        if eta.kind == "constant" and len(eta.value) != s.param_dim:
            raise ContractError(
                f"{s.name}: constant value has length {len(eta.value)}, needs {s.param_dim}")
        lam = s.lam
        if lam is not None and lam.kind == "constant" and len(lam.value) != s.param_dim:
            raise ContractError(
                f"{s.name}: constant value has length {len(lam.value)}, needs {s.param_dim}")
        normalized.append(VariableSpec(
            name=s.name, family=s.family, shape=tuple(s.shape),
            supervision=s.supervision,
            generative_parents=tuple(s.generative_parents),
            recognition_parents=tuple(s.recognition_parents),
            eta=eta, lam=lam))
    gen_edges = {s.name: s.generative_parents for s in normalized}
    rec_edges = {s.name: s.recognition_parents for s in normalized}
    _toposort(names, gen_edges, "generative")
    _toposort(names, rec_edges, "recognition")
    return ModelGraph(variables=tuple(normalized),
                      index={n: i for i, n in enumerate(names)})


# ---------------------------------------------------------------------------
# compilation

@dataclass(frozen=True)
class ParamFunction:
    """Handle from one node's parameter slot into the parameter store."""

    var: str
    role: str                    # 'eta' | 'lam'
    spec: FuncSpec
    in_dim: int
    out_dim: int
    param_names: tuple[str, ...]  # W0, b0, W1, b1, ... for MLPs

    def __call__(self, inputs: Sequence[Tensor], params: Mapping[str, Tensor],
                 batch: int) -> Tensor:
        if self.spec.kind == "constant":
            row = np.asarray(self.spec.value, dtype=np.float64)
            return as_tensor(np.broadcast_to(row, (batch, self.out_dim)).copy())
        got = sum(t.data.shape[1] for t in inputs)
        if got != self.in_dim:
            raise DimensionError(
                f"{self.var}.{self.role}: parent features total {got}, expected {self.in_dim}")
        h = inputs[0] if len(inputs) == 1 else T.concat(list(inputs), axis=1)
        act = ACTIVATIONS[self.spec.activation]
        n_layers = len(self.param_names) // 2
        for i in range(n_layers):
            w = params[self.param_names[2 * i]]
            b = params[self.param_names[2 * i + 1]]
            h = T.add_bias(T.matmul(h, w), b)
            if i < n_layers - 1:
                h = act(h)
        return h


@dataclass(frozen=True)
class ExecutionPlan:
    graph: ModelGraph
    recognition_order: tuple[str, ...]   # non-observed variables only
    generative_order: tuple[str, ...]    # every variable
    eta_fns: Mapping[str, ParamFunction]
    lam_fns: Mapping[str, ParamFunction]
    init_values: Mapping[str, np.ndarray]
    init_seed: int

    def init_params(self) -> dict[str, Tensor]:
        """Fresh trainable tensors holding the initialization values."""
        return {k: Tensor(v.copy()) for k, v in self.init_values.items()}

    def noise_requirements(self) -> dict[str, tuple[str, int]]:
        out = {}
        for name in self.recognition_order:
            s = self.graph.spec(name)
            out[name] = ("gumbel" if s.family == "categorical" else "normal", s.dim)
        return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def compile_model(graph: ModelGraph, init_seed: int) -> ExecutionPlan:
    """Fix topological orders and materialize MLP parameter blocks.

    Deterministic: the same (graph, init_seed) yields bit-identical values.
    """
    names = [v.name for v in graph.variables]
    gen_order = _toposort(names, {v.name: v.generative_parents for v in graph.variables},
                          "generative")
    rec_full = _toposort(names, {v.name: v.recognition_parents for v in graph.variables},
                         "recognition")
    rec_order = tuple(n for n in rec_full if graph.spec(n).supervision != "observed")

    rng = np.random.default_rng(init_seed)
    init_values: dict[str, np.ndarray] = {}
    eta_fns: dict[str, ParamFunction] = {}
    lam_fns: dict[str, ParamFunction] = {}

    def build(spec: VariableSpec, role: str, fn: FuncSpec,
              parents: tuple[str, ...]) -> ParamFunction:
        in_dim = sum(graph.spec(p).dim for p in parents)
        out_dim = spec.param_dim
        if fn.kind == "constant":
            return ParamFunction(spec.name, role, fn, 0, out_dim, ())
        widths = [in_dim, *fn.hidden, out_dim]
        pnames = []
        for i in range(len(widths) - 1):
            wn = f"{spec.name}:{role}:W{i}"
            bn = f"{spec.name}:{role}:b{i}"
            init_values[wn] = _glorot(rng, widths[i], widths[i + 1])
            init_values[bn] = np.zeros(widths[i + 1])
            pnames += [wn, bn]
        return ParamFunction(spec.name, role, fn, in_dim, out_dim, tuple(pnames))

    for spec in graph.variables:  # declaration order: deterministic init
        eta_fns[spec.name] = build(spec, "eta", spec.eta, spec.generative_parents)
        if spec.lam is not None:
            lam_fns[spec.name] = build(spec, "lam", spec.lam, spec.recognition_parents)

    return ExecutionPlan(graph=graph, recognition_order=rec_order,
                         generative_order=tuple(gen_order), eta_fns=eta_fns,
                         lam_fns=lam_fns, init_values=init_values,
                         init_seed=init_seed)


# ---------------------------------------------------------------------------
# noise

class NoiseStream:
    """Deterministic source of the externally drawn randomness."""

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)

    def normal(self, shape) -> np.ndarray:
        return self._rng.standard_normal(shape)

    def gumbel(self, shape) -> np.ndarray:
        u = np.clip(self._rng.random(shape), 1e-300, None)
        return -np.log(-np.log(u))


# ---------------------------------------------------------------------------
# traces

@dataclass
class Trace:
    """Record of one stochastic forward execution over a batch of rows."""

    values: dict[str, Tensor]            # [B, dim] per variable
    gen_logp: dict[str, Tensor]          # [B, 1] per variable
    rec_logp: dict[str, Tensor]          # [B, 1], non-observed variables only
    rec_params: dict[str, DistParams]
    log_w: Tensor                        # [B, 1]
    supplied: frozenset[str]
    batch: int

    def log_joint_p(self) -> Tensor:
        total = None
        for lp in self.gen_logp.values():
            total = lp if total is None else T.add(total, lp)
        return total

    def log_joint_q(self) -> Tensor:
        total = None
        for lp in self.rec_logp.values():
            total = lp if total is None else T.add(total, lp)
        if total is None:
            return as_tensor(np.zeros((self.batch, 1)))
        return total


def importance_weight(trace: Trace) -> Tensor:
    """log w: the summed recognition log probability of the supplied variables."""
    return trace.log_w


def _as_batch(name: str, value, dim: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(f"{name}: expected [batch, {dim}], got {arr.shape}")
    return arr


def _hard_one_hot(soft: np.ndarray) -> np.ndarray:
    out = np.zeros_like(soft)
    out[np.arange(soft.shape[0]), np.argmax(soft, axis=1)] = 1.0
    return out


def run_trace(plan: ExecutionPlan, observed, supplied_labels: Mapping[str, np.ndarray] | None,
              params: Mapping[str, Tensor], noise: NoiseStream, *,
              temperature: float = DEFAULT_TEMPERATURE, relax: bool = True,
              straight_through: bool = False,
              shared: dict | None = None) -> Trace:
    """One forward pass: recognition sampling, then generative scoring.

    ``observed`` maps observed-variable names to [B, dim] arrays (a bare array
    is accepted when the model has exactly one observed variable). Supplied
    labels clamp their variables to exact one-hots and add their recognition
    log probability to the log importance weight; unsupplied partial variables
    are sampled with the concrete relaxation while ``relax`` is on (training)
    and as exact one-hots otherwise (evaluation/generation). ``shared``, when
    given, caches recognition parameters of variables whose parents are all
    observed, so several traces of the same batch reuse one sub-graph.
    """
    graph = plan.graph
    supplied = dict(supplied_labels or {})
    for name in supplied:
        if name not in graph.index or graph.spec(name).supervision != "partial":
            raise ContractError(f"label supplied for non-partial variable {name!r}")

    if not isinstance(observed, Mapping):
        obs_names = graph.observed
        if len(obs_names) != 1:
            raise ContractError("pass observed values as a dict: model has "
                                f"{len(obs_names)} observed variables")
        observed = {obs_names[0]: observed}

    values: dict[str, Tensor] = {}
    batch = None
    for name in graph.observed:
        if name not in observed:
            raise ContractError(f"missing value for observed variable {name!r}")
        arr = _as_batch(name, observed[name], graph.spec(name).dim)
        if batch is None:
            batch = arr.shape[0]
        elif arr.shape[0] != batch:
            raise DimensionError(f"{name}: batch {arr.shape[0]} != {batch}")
        values[name] = as_tensor(arr)
    if batch is None:
        batch = 1
        for k, v in supplied.items():
            batch = _as_batch(k, v, graph.spec(k).dim).shape[0]
            break

    rec_logp: dict[str, Tensor] = {}
    rec_params: dict[str, DistParams] = {}
    log_w_terms: list[Tensor] = []

    for name in plan.recognition_order:
        spec = graph.spec(name)
        if shared is not None and name in shared:
            dp = shared[name]
        else:
            inputs = [values[p] for p in spec.recognition_parents]
            dp = _to_dist_params(spec, plan.lam_fns[name](inputs, params, batch))
            if shared is not None and all(
                    graph.spec(p).supervision == "observed"
                    for p in spec.recognition_parents):
                shared[name] = dp
        rec_params[name] = dp

        if name in supplied:
            value = as_tensor(_check_one_hot_label(
                name, _as_batch(name, supplied[name], spec.dim), batch))
            lp = dist.categorical_log_prob(value, dp.logits)
            log_w_terms.append(lp)
        elif spec.family == "categorical":
            if relax:
                g = noise.gumbel((batch, spec.dim))
                value = dist.concrete_rsample(dp.logits, temperature, g)
                if straight_through:
                    hard = as_tensor(_hard_one_hot(value.data))
                    value = T.add(value, T.stop_gradient(T.sub(hard, value)))
                lp = dist.categorical_log_prob(value, dp.logits, allow_soft=True)
            else:
                g = noise.gumbel((batch, spec.dim))
                value = as_tensor(_hard_one_hot(dp.logits.data + g))
                lp = dist.categorical_log_prob(value, dp.logits)
        else:  # diag-normal
            eps = noise.normal((batch, spec.dim))
            value = dist.normal_rsample(dp.mean, dp.log_std, eps)
            lp = dist.normal_log_prob(value, dp.mean, dp.log_std)
        values[name] = value
        rec_logp[name] = lp

    gen_logp: dict[str, Tensor] = {}
    for name in plan.generative_order:
        spec = graph.spec(name)
        inputs = [values[p] for p in spec.generative_parents]
        dp = _to_dist_params(spec, plan.eta_fns[name](inputs, params, batch))
        gen_logp[name] = dist.log_prob(values[name], dp, soft_discrete=True)

    if log_w_terms:
        log_w = log_w_terms[0]
        for term in log_w_terms[1:]:
            log_w = T.add(log_w, term)
    else:
        log_w = as_tensor(np.zeros((batch, 1)))

    return Trace(values=values, gen_logp=gen_logp, rec_logp=rec_logp,
                 rec_params=rec_params, log_w=log_w,
                 supplied=frozenset(supplied), batch=batch)


def _check_one_hot_label(name: str, arr: np.ndarray, batch: int) -> np.ndarray:
    if arr.shape[0] == 1 and batch > 1:
        arr = np.broadcast_to(arr, (batch, arr.shape[1])).copy()
    if arr.shape[0] != batch:
        raise DimensionError(f"{name}: label batch {arr.shape[0]} != {batch}")
    ones = np.abs(arr - 1.0) < 1e-12
    zeros = np.abs(arr) < 1e-12
    if not (np.all(ones | zeros) and np.all(ones.sum(axis=1) == 1)):
        raise ContractError(f"{name}: supplied labels must be exact one-hots")
    return arr


def _to_dist_params(spec: VariableSpec, raw: Tensor) -> DistParams:
    if spec.family == "diag-normal":
        d = spec.dim
        mean = _slice_cols(raw, 0, d)
        log_std = _slice_cols(raw, d, 2 * d)
        return DistParams(family="diag-normal", mean=mean, log_std=log_std)
    return DistParams(family=spec.family, logits=raw)


def _slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    data = t.data[:, start:stop]
    width = t.data.shape[1]

    def pull(g, start=start, stop=stop, width=width):
        out = np.zeros((g.shape[0], width))
        out[:, start:stop] = g
        return out

    return T._emit([t], data, [(t, pull)])


# ---------------------------------------------------------------------------
# JSON model files

def model_to_json(graph: ModelGraph) -> dict:
    def fn(f: FuncSpec | None):
        if f is None:
            return None
        if f.kind == "constant":
            return {"kind": "constant", "value": list(f.value)}
        return {"kind": "mlp", "hidden": list(f.hidden), "activation": f.activation}

    return {"variables": [
        {"name": v.name, "family": v.family, "shape": list(v.shape),
         "supervision": v.supervision,
         "generative_parents": list(v.generative_parents),
         "recognition_parents": list(v.recognition_parents),
         "eta": fn(v.eta), "lambda": fn(v.lam)}
        for v in graph.variables]}


def model_from_json(doc: dict) -> ModelGraph:
    if not isinstance(doc, dict) or "variables" not in doc:
        raise ContractError("model file needs a top-level 'variables' list")

    def fn(d):
        if d is None:
            return None
        if d.get("kind") == "constant":
            return FuncSpec(kind="constant", value=tuple(float(x) for x in d["value"]))
        return FuncSpec(kind="mlp", hidden=tuple(int(h) for h in d.get("hidden", [256])),
                        activation=d.get("activation", "tanh"))

    specs = []
    for v in doc["variables"]:
        specs.append(VariableSpec(
            name=v["name"], family=v["family"], shape=tuple(int(s) for s in v["shape"]),
            supervision=v["supervision"],
            generative_parents=tuple(v.get("generative_parents", [])),
            recognition_parents=tuple(v.get("recognition_parents", [])),
            eta=fn(v.get("eta")), lam=fn(v.get("lambda"))))
    return define_model(specs)


def load_model_spec(path) -> ModelGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(json.load(fh))


def model_digest(graph: ModelGraph) -> str:
    """Stable content hash of a model spec (ties checkpoints to their model)."""
    canon = json.dumps(model_to_json(graph), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def mnist_spec(d_z: int = 10, hidden: int = 256, n_classes: int = 10,
               n_pixels: int = 784) -> ModelGraph:
    """Digit label y (partially supervised) + style z, Bernoulli pixels."""
    mlp = lambda: FuncSpec(kind="mlp", hidden=(hidden,), activation="tanh")
    return define_model([
        VariableSpec("x", "bernoulli", (n_pixels,), "observed",
                     generative_parents=("y", "z"), eta=mlp()),
        VariableSpec("y", "categorical", (n_classes,), "partial",
                     recognition_parents=("x",), lam=mlp()),
        VariableSpec("z", "diag-normal", (d_z,), "latent",
                     recognition_parents=("x", "y"), lam=mlp()),
    ])
