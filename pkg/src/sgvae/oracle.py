"""Exact enumeration over small tabular models: ground truth for every
estimator, plus seeded statistical comparisons against the objective module.

A :class:`TabularModel` is a fully discrete graphical model given by
conditional probability tables for both the generative and recognition
factorizations. Everything an estimator targets is computable here by brute
force: the label marginal under the encoder, the conditional expectation the
self-normalized weights approximate, the exact unsupervised bound, and the
large-sample limits of both supervised objectives. Golden values are always
regenerated from seeds at test time, never hand-entered.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import objective
from .errors import CapacityError, ContractError, DomainError
from .model import Trace
from .tensor import Tensor, as_tensor

MAX_JOINT = 1_000_000
ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class TabularVariable:
    name: str
    domain: int                 # number of states
    supervision: str            # 'observed' | 'latent' | 'partial'


@dataclass
class TabularModel:
    """CPTs for every generative factor and every recognition factor.

    A factor for variable v with parents (p1, .., pk) is an array of shape
    (dom(p1), .., dom(pk), dom(v)) whose last axis sums to 1. Recognition
    factors exist for non-observed variables only and are evaluated in
    declaration order, which must topologically order the recognition DAG.
    """

    variables: tuple[TabularVariable, ...]
    gen_factors: Mapping[str, tuple[tuple[str, ...], np.ndarray]]
    rec_factors: Mapping[str, tuple[tuple[str, ...], np.ndarray]]
    name: str = "tabular"

    def __post_init__(self):
        self._index = {v.name: v for v in self.variables}
        joint = 1
        for v in self.variables:
            joint *= v.domain
            if joint > MAX_JOINT:
                raise CapacityError(f"joint domain exceeds {MAX_JOINT} states")
        for label, factors in (("generative", self.gen_factors),
                               ("recognition", self.rec_factors)):
            for name, (parents, table) in factors.items():
                var = self._index[name]
                expect = tuple(self._index[p].domain for p in parents) + (var.domain,)
                if table.shape != expect:
                    raise ContractError(
                        f"{label} table for {name}: shape {table.shape}, expected {expect}")
                if np.any(table < 0):
                    raise DomainError(f"{label} table for {name} has negative entries")
                sums = table.sum(axis=-1)
                if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
                    raise DomainError(
                        f"{label} table for {name}: rows do not sum to 1 "
                        f"(max deviation {np.max(np.abs(sums - 1.0)):.3e})")
        for v in self.variables:
            if v.name not in self.gen_factors:
                raise ContractError(f"missing generative factor for {v.name}")
            if v.supervision != "observed" and v.name not in self.rec_factors:
                raise ContractError(f"missing recognition factor for {v.name}")

    def var(self, name: str) -> TabularVariable:
        return self._index[name]

    @property
    def observed(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.supervision == "observed")

    @property
    def non_observed(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.supervision != "observed")

    @property
    def partial(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.supervision == "partial")


def _random_table(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    # strictly positive rows, normalized on the last axis
    t = rng.gamma(2.0, 1.0, size=shape) + 0.05
    return t / t.sum(axis=-1, keepdims=True)


def make_chain_model(seed: int, dx: int = 4, dz1: int = 3, dy: int = 3,
                     dz2: int = 3) -> TabularModel:
    """Recognition chain z1 | x, then y1 | z1, x, then z2 | y1, z1, x: the
    dependency structure whose importance weight varies across samples."""
    rng = np.random.default_rng(seed)
    variables = (TabularVariable("x", dx, "observed"),
                 TabularVariable("z1", dz1, "latent"),
                 TabularVariable("y1", dy, "partial"),
                 TabularVariable("z2", dz2, "latent"))
    gen = {
        "z1": ((), _random_table(rng, (dz1,))),
        "y1": (("z1",), _random_table(rng, (dz1, dy))),
        "z2": (("y1",), _random_table(rng, (dy, dz2))),
        "x": (("z1", "y1", "z2"), _random_table(rng, (dz1, dy, dz2, dx))),
    }
    rec = {
        "z1": (("x",), _random_table(rng, (dx, dz1))),
        "y1": (("z1", "x"), _random_table(rng, (dz1, dx, dy))),
        "z2": (("y1", "z1", "x"), _random_table(rng, (dy, dz1, dx, dz2))),
    }
    return TabularModel(variables, gen, rec, name="chain")


def make_kingma_model(seed: int, dx: int = 5, dy: int = 4, dz: int = 3) -> TabularModel:
    """Recognition y | x and z | x, y: the factorization whose importance
    weight q(y|x) is constant across samples."""
    rng = np.random.default_rng(seed)
    variables = (TabularVariable("x", dx, "observed"),
                 TabularVariable("y", dy, "partial"),
                 TabularVariable("z", dz, "latent"))
    gen = {
        "y": ((), _random_table(rng, (dy,))),
        "z": ((), _random_table(rng, (dz,))),
        "x": (("y", "z"), _random_table(rng, (dy, dz, dx))),
    }
    rec = {
        "y": (("x",), _random_table(rng, (dx, dy))),
        "z": (("x", "y"), _random_table(rng, (dx, dy, dz))),
    }
    return TabularModel(variables, gen, rec, name="kingma")


# ---------------------------------------------------------------------------
# exact quantities

def _log_factor(model: TabularModel, factors, name: str,
                assign: Mapping[str, int]) -> float:
    parents, table = factors[name]
    idx = tuple(assign[p] for p in parents) + (assign[name],)
    return math.log(table[idx])


def _assignments(model: TabularModel, names: Sequence[str]):
    domains = [range(model.var(n).domain) for n in names]
    for combo in itertools.product(*domains):
        yield dict(zip(names, combo))


@dataclass(frozen=True)
class ExactQuantities:
    """Brute-force targets for one (x, y) pair at a given alpha."""

    log_q_label: float           # log q(y|x) by marginalizing the latents
    expected_log_weight: float   # E over the proposal of log w (<= log_q_label)
    conditional_log_ratio: float  # E_{q(z|x,y)}[log p(x,y,z) - log q(y,z|x)]
    elbo: float                  # E_{q(y,z|x)}[log p - log q], nothing supplied
    log_p_joint_label: float     # log p(x, y)
    alpha: float

    @property
    def snis_limit(self) -> float:
        """Large-sample limit of the self-normalized supervised estimator."""
        return self.conditional_log_ratio + (1.0 + self.alpha) * self.expected_log_weight

    @property
    def supervised_bound_target(self) -> float:
        """The quantity the estimator lower-bounds: cond + (1+alpha) log q(y|x)."""
        return self.conditional_log_ratio + (1.0 + self.alpha) * self.log_q_label

    @property
    def iwae_limit(self) -> float:
        """Large-sample limit of the importance-weighted variant."""
        return self.log_p_joint_label + self.alpha * self.log_q_label


def exact_quantities(model: TabularModel, x: Mapping[str, int] | int,
                     y: Mapping[str, int] | int, alpha: float = 0.0) -> ExactQuantities:
    """All expectations by full summation over the latent domains."""
    x = _coerce_assignment(model, x, model.observed, "observed")
    y = _coerce_assignment(model, y, model.partial, "partial")
    for name, val in {**x, **y}.items():
        if not 0 <= val < model.var(name).domain:
            raise DomainError(f"{name}={val} outside domain {model.var(name).domain}")
    latents = [n for n in model.non_observed if n not in y]

    log_qs, log_ps, log_ws = [], [], []
    for z in _assignments(model, latents):
        assign = {**x, **y, **z}
        lq = sum(_log_factor(model, model.rec_factors, n, assign)
                 for n in model.non_observed)
        lp = sum(_log_factor(model, model.gen_factors, n, assign)
                 for n in (v.name for v in model.variables))
        lw = sum(_log_factor(model, model.rec_factors, n, assign) for n in y)
        log_qs.append(lq)
        log_ps.append(lp)
        log_ws.append(lw)
    log_qs, log_ps, log_ws = map(np.array, (log_qs, log_ps, log_ws))

    # marginal of the supplied variables under the encoder: sum over z of q(y,z|x)
    log_q_label = _logsumexp(log_qs)
    # proposal over latents only: log q_prop = log q - log w
    log_prop = log_qs - log_ws
    prop = np.exp(log_prop)
    expected_log_weight = float(np.sum(prop * log_ws))
    # conditional q(z | x, y) = q(y, z | x) / q(y | x)
    cond = np.exp(log_qs - log_q_label)
    conditional_log_ratio = float(np.sum(cond * (log_ps - log_qs)))
    log_p_joint_label = _logsumexp(log_ps)

    # unsupervised bound enumerates the partials too
    elbo = 0.0
    for z in _assignments(model, list(model.non_observed)):
        assign = {**x, **z}
        lq = sum(_log_factor(model, model.rec_factors, n, assign)
                 for n in model.non_observed)
        lp = sum(_log_factor(model, model.gen_factors, n, assign)
                 for n in (v.name for v in model.variables))
        elbo += math.exp(lq) * (lp - lq)

    return ExactQuantities(log_q_label=float(log_q_label),
                           expected_log_weight=expected_log_weight,
                           conditional_log_ratio=conditional_log_ratio,
                           elbo=float(elbo),
                           log_p_joint_label=float(log_p_joint_label),
                           alpha=float(alpha))


def log_q_label_two_ways(model: TabularModel, x, y) -> tuple[float, float]:
    """log q(y|x) by joint enumeration and by sequential elimination."""
    x = _coerce_assignment(model, x, model.observed, "observed")
    y = _coerce_assignment(model, y, model.partial, "partial")
    via_joint = exact_quantities(model, x, y).log_q_label

    # sequential: forward pass over recognition factors in declaration order,
    # carrying a distribution over the non-observed prefix
    names = list(model.non_observed)
    weights = {(): 1.0}
    for n in names:
        parents, table = model.rec_factors[n]
        nxt: dict[tuple, float] = {}
        for prefix, w in weights.items():
            assign = {**x, **dict(zip(names, prefix))}
            row = table[tuple(assign[p] for p in parents)]
            if n in y:
                key = prefix + (y[n],)
                nxt[key] = nxt.get(key, 0.0) + w * row[y[n]]
            else:
                for k in range(model.var(n).domain):
                    key = prefix + (k,)
                    nxt[key] = nxt.get(key, 0.0) + w * row[k]
        weights = nxt
    via_chain = math.log(sum(weights.values()))
    return via_joint, via_chain


def _coerce_assignment(model: TabularModel, value, names: tuple[str, ...],
                       kind: str) -> dict[str, int]:
    if isinstance(value, Mapping):
        return {k: int(v) for k, v in value.items()}
    if len(names) != 1:
        raise ContractError(f"model has {len(names)} {kind} variables; pass a dict")
    return {names[0]: int(value)}


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    return float(m + np.log(np.sum(np.exp(a - m))))


# ---------------------------------------------------------------------------
# sampling the proposal (exact categorical draws)

def sample_proposal(model: TabularModel, x, y, s: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """S exact draws of the unsupplied variables from the recognition
    factorization, conditioned on x and the supplied y.

    Returns (log_p, log_q, log_w), each of shape [S]. Vectorized over S.
    """
    x = _coerce_assignment(model, x, model.observed, "observed")
    y = _coerce_assignment(model, y, model.partial, "partial")
    values: dict[str, np.ndarray] = {k: np.full(s, v, dtype=np.int64)
                                     for k, v in {**x, **y}.items()}
    log_q = np.zeros(s)
    log_w = np.zeros(s)
    for n in model.non_observed:
        parents, table = model.rec_factors[n]
        rows = table[tuple(values[p] for p in parents)]  # [S, dom]
        if n in y:
            picked = values[n]
        else:
            cdf = np.cumsum(rows, axis=1)
            u = rng.random((s, 1)) * cdf[:, -1:]
            picked = (u > cdf[:, :-1]).sum(axis=1) if rows.shape[1] > 1 \
                else np.zeros(s, dtype=np.int64)
            values[n] = picked
        lp = np.log(rows[np.arange(s), picked])
        log_q += lp
        if n in y:
            log_w += lp
    log_p = np.zeros(s)
    for v in model.variables:
        parents, table = model.gen_factors[v.name]
        rows = table[tuple(values[p] for p in parents)] if parents \
            else np.broadcast_to(table, (s, table.shape[-1]))
        log_p += np.log(rows[np.arange(s), values[v.name]])
    return log_p, log_q, log_w


def traces_from_tabular(model: TabularModel, x, y, s: int,
                        rng: np.random.Generator) -> list[Trace]:
    """S single-row traces with exactly sampled values; parity path for the
    trace-based estimator API on small S."""
    xd = _coerce_assignment(model, x, model.observed, "observed")
    yd = _coerce_assignment(model, y, model.partial, "partial")
    traces = []
    for _ in range(s):
        lp, lq, lw = sample_proposal(model, xd, yd, 1, rng)
        gen_col = as_tensor(lp.reshape(1, 1))
        rec_col = as_tensor(lq.reshape(1, 1))
        traces.append(Trace(values={}, gen_logp={"all": gen_col},
                            rec_logp={"all": rec_col}, rec_params={},
                            log_w=as_tensor(lw.reshape(1, 1)),
                            supplied=frozenset(yd), batch=1))
    return traces


# ---------------------------------------------------------------------------
# statistical comparison

COMPARISON_VARIANTS = ("snis-conditional", "logw-bound", "snis", "iwae")


@dataclass
class ComparisonRow:
    model: str
    variant: str
    s: int
    seeds: int
    mean: float
    stderr: float
    exact: float
    z: float
    bound: str = "two-sided"     # 'two-sided' | 'upper'
    passed: bool = True
    note: str = ""


def compare_estimator(model: TabularModel, x, y, s: int, n_seeds: int,
                      variant: str, alpha: float = 0.0,
                      base_seed: int = 0) -> ComparisonRow:
    """Run the objective-module estimator n_seeds times with independent
    noise; report mean, stderr, and z-score against exact enumeration."""
    if s < 1 or n_seeds < 2:
        raise ContractError("need s >= 1 and n_seeds >= 2")
    if variant not in COMPARISON_VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    exact = exact_quantities(model, x, y, alpha=alpha)
    targets = {
        "snis-conditional": (exact.conditional_log_ratio, "two-sided"),
        "logw-bound": (exact.expected_log_weight, "two-sided"),
        "snis": (exact.snis_limit, "two-sided"),
        "iwae": (exact.iwae_limit, "upper"),
    }
    target, bound = targets[variant]
    values = []
    for k in range(n_seeds):
        rng = np.random.default_rng([base_seed, k])
        lp, lq, lw = sample_proposal(model, x, y, s, rng)
        log_p = as_tensor(lp.reshape(1, s))
        log_q = as_tensor(lq.reshape(1, s))
        log_w = as_tensor(lw.reshape(1, s))
        if variant == "snis-conditional":
            v = objective.snis_expectation_from_logs(log_p, log_q, log_w)
        elif variant == "logw-bound":
            v = objective.log_marginal_bound_from_logs(log_w)
        elif variant == "snis":
            v = objective.supervised_estimator_from_logs(log_p, log_q, log_w, alpha)
        else:
            v = objective.supervised_iwae_from_logs(log_p, log_q, log_w, alpha)
        values.append(v.item())
    values = np.array(values)
    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / math.sqrt(n_seeds))
    if stderr == 0.0:
        z = 0.0 if abs(mean - target) < 1e-10 else math.inf
    else:
        z = (mean - target) / stderr
    if bound == "upper":
        passed = mean <= target + 3.0 * stderr + 1e-12
    else:
        passed = abs(z) < 3.0
    return ComparisonRow(model=model.name, variant=variant, s=s, seeds=n_seeds,
                         mean=mean, stderr=stderr, exact=target, z=float(z),
                         bound=bound, passed=passed)


# ---------------------------------------------------------------------------
# the verification suite

@dataclass
class VerificationReport:
    rows: list[ComparisonRow] = field(default_factory=list)
    identity_checks: list[tuple[str, bool, str]] = field(default_factory=list)
    sweep_rows: list[ComparisonRow] = field(default_factory=list)
    sweep_monotone: bool | None = None

    @property
    def all_passed(self) -> bool:
        ok = all(r.passed for r in self.rows)
        ok = ok and all(passed for _, passed, _ in self.identity_checks)
        if self.sweep_monotone is not None:
            ok = ok and self.sweep_monotone
        return ok

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["model", "variant", "S", "seeds", "mean", "stderr", "exact", "z"])
        for r in self.rows + self.sweep_rows:
            w.writerow([r.model, r.variant, r.s, r.seeds,
                        f"{r.mean:.10g}", f"{r.stderr:.10g}",
                        f"{r.exact:.10g}", f"{r.z:.6g}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'model':<10}{'variant':<18}{'S':>8}{'seeds':>7}"
                 f"{'mean':>15}{'stderr':>12}{'exact':>15}{'z':>10}  status"]
        for r in self.rows + self.sweep_rows:
            lines.append(f"{r.model:<10}{r.variant:<18}{r.s:>8}{r.seeds:>7}"
                         f"{r.mean:>15.6f}{r.stderr:>12.2e}{r.exact:>15.6f}"
                         f"{r.z:>10.3f}  {'ok' if r.passed else 'FAIL'}"
                         f"{('  ' + r.note) if r.note else ''}")
        lines.append("")
        for name, passed, detail in self.identity_checks:
            lines.append(f"identity {name}: {'ok' if passed else 'FAIL'} ({detail})")
        if self.sweep_monotone is not None:
            lines.append(f"bias sweep monotone: {'ok' if self.sweep_monotone else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.all_passed else 'FAIL'}")
        return "\n".join(lines)


def run_verification(s: int = 50_000, n_seeds: int = 20, alpha: float = 0.5,
                     seed: int = 20240, s_sweep: Sequence[int] | None = (1, 100, 10_000),
                     sweep_seeds: int = 50) -> VerificationReport:
    """The default estimator-verification suite over the chain and
    constant-weight models."""
    report = VerificationReport()
    chain = make_chain_model(seed)
    kingma = make_kingma_model(seed + 1)
    x, y = 0, 1

    for variant in COMPARISON_VARIANTS:
        report.rows.append(compare_estimator(chain, x, {"y1": y}, s, n_seeds,
                                             variant, alpha, base_seed=seed + 10))
    for variant in COMPARISON_VARIANTS:
        row = compare_estimator(kingma, x, {"y": y}, s, n_seeds, variant,
                                alpha, base_seed=seed + 20)
        if variant == "logw-bound":
            # constant weights: deterministic, must match log q(y|x) exactly
            lq = exact_quantities(kingma, x, {"y": y}).log_q_label
            row.passed = abs(row.mean - lq) < 1e-10 and row.stderr == 0.0
            row.note = "constant weights"
        report.rows.append(row)

    # identities
    vj, vc = log_q_label_two_ways(chain, x, {"y1": y})
    report.identity_checks.append(
        ("log q(y|x) two ways", abs(vj - vc) < 1e-12, f"|{vj:.12f} - {vc:.12f}|"))
    eq = exact_quantities(chain, x, {"y1": y}, alpha=alpha)
    lhs = eq.supervised_bound_target
    rhs = eq.conditional_log_ratio + (1.0 + alpha) * eq.log_q_label
    report.identity_checks.append(
        ("supervised-term decomposition", abs(lhs - rhs) < 1e-12, f"{lhs:.12f}"))
    report.identity_checks.append(
        ("log w bound below label marginal",
         eq.expected_log_weight <= eq.log_q_label + 1e-12,
         f"{eq.expected_log_weight:.6f} <= {eq.log_q_label:.6f}"))

    # consistency sweep: |bias| of the self-normalized term shrinks with S
    if s_sweep:
        biases = []
        for i, sw in enumerate(s_sweep):
            row = compare_estimator(chain, x, {"y1": y}, sw, sweep_seeds,
                                    "snis-conditional", alpha,
                                    base_seed=seed + 100 + i)
            row.note = f"bias {row.mean - row.exact:+.5f}"
            report.sweep_rows.append(row)
            biases.append(abs(row.mean - row.exact))
        report.sweep_monotone = all(b1 >= b2 - 1e-12
                                    for b1, b2 in zip(biases, biases[1:]))
    return report
