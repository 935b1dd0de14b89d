"""Optimizer, semi-supervised batching, the training loop, and evaluation.

One step pairs one unsupervised mini-batch with one supervised mini-batch
(the small supervised set cycles, reshuffled each pass); each batch
contributes its per-point mean scaled by the full dataset size, so a step
estimates the full-data objective and gamma modulates the supervision rate
exactly. An epoch is one pass over the unsupervised set.
"""

from __future__ import annotations

import hashlib
import io
import struct
import time
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import objective as obj
from . import tensor as T
from .data import Dataset
from .errors import (ContractError, DimensionError, FormatError, LengthError,
                     TrainingDiverged)
from .model import ExecutionPlan, NoiseStream, run_trace
from .objective import ObjectiveConfig
from .tensor import Tape, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """Bias-corrected adaptive update, in place; deterministic."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"{name}: grad {g.shape} vs param {p.data.shape}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_unsup: int = 200
    batch_sup: int = 100
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1           # epochs between test-error evaluations

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_unsup < 0 or self.batch_sup < 0:
            raise ContractError("batch sizes must be >= 0")
        if self.lr < 0:
            raise ContractError(f"learning rate must be >= 0, got {self.lr}")


def make_batches(sup_set: Dataset | None, unsup_set: Dataset | None,
                 config: TrainConfig, epoch_seed: int
                 ) -> Iterator[tuple[np.ndarray | None, np.ndarray | None]]:
    """Yield (unsup_indices, sup_indices) pairs for one epoch.

    One pass over the unsupervised set defines the epoch; the supervised set
    cycles with a reshuffle at each exhaustion. With no unsupervised stream
    the epoch is a single pass over the supervised set. Deterministic given
    epoch_seed.
    """
    rng = np.random.default_rng(epoch_seed)
    n = len(unsup_set) if (unsup_set is not None and config.batch_unsup > 0) else 0
    m = len(sup_set) if (sup_set is not None and config.batch_sup > 0) else 0
    if n == 0 and m == 0:
        raise ContractError("both data streams are empty")

    sup_perm = rng.permutation(m) if m else None
    sup_pos = 0

    def next_sup(k: int) -> np.ndarray:
        nonlocal sup_perm, sup_pos
        out = []
        need = k
        while need > 0:
            take = min(need, m - sup_pos)
            out.append(sup_perm[sup_pos:sup_pos + take])
            sup_pos += take
            need -= take
            if sup_pos == m:
                sup_perm = rng.permutation(m)
                sup_pos = 0
        return np.concatenate(out)

    if n == 0:
        for start in range(0, m, config.batch_sup):
            yield None, sup_perm[start:start + config.batch_sup]
        return

    unsup_perm = rng.permutation(n)
    for start in range(0, n, config.batch_unsup):
        u_idx = unsup_perm[start:start + config.batch_unsup]
        s_idx = next_sup(min(config.batch_sup, m)) if m else None
        yield u_idx, s_idx


@dataclass
class EpochMetrics:
    objective: float
    sup_term: float
    unsup_term: float
    seconds: float
    steps: int


def _label_variable(plan: ExecutionPlan) -> str:
    partial = plan.graph.partial
    if len(partial) != 1:
        raise ContractError(f"expected exactly one partially supervised variable, "
                            f"found {list(partial)}")
    return partial[0]


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _supervised_value(traces, cfg: ObjectiveConfig):
    if cfg.variant == "iwae":
        return obj.supervised_iwae(traces, cfg.alpha)
    return obj.supervised_estimator(traces, cfg.alpha, cfg.detach_weights)


def train_epoch(plan: ExecutionPlan, params: Mapping[str, Tensor],
                sup_set: Dataset | None, unsup_set: Dataset | None,
                config: TrainConfig, opt_state: AdamState, epoch: int,
                observed_var: str | None = None) -> EpochMetrics:
    """One pass: per step, S traces per data point, combined objective,
    backward, Adam. Aborts with a diagnostic if the objective goes
    non-finite."""
    cfg = config.objective
    graph = plan.graph
    obs_name = observed_var or graph.observed[0]
    label_var = _label_variable(plan) if sup_set is not None else None
    k_label = graph.spec(label_var).dim if label_var else 0
    n_total = len(unsup_set) if unsup_set is not None else 0
    m_total = len(sup_set) if sup_set is not None else 0
    kl_vars = obj.analytic_kl_vars(plan) if cfg.analytic_kl else ()

    noise = NoiseStream([config.seed, 1000 + epoch])
    t0 = time.perf_counter()
    tot_obj = tot_sup = tot_unsup = 0.0
    steps = 0

    for u_idx, s_idx in make_batches(sup_set, unsup_set, config,
                                     epoch_seed=[config.seed, epoch]):
        tape = Tape()
        tape.watch(*params.values())

        unsup_vals = None
        if u_idx is not None and len(u_idx):
            xu = unsup_set.features[u_idx]
            shared: dict = {}
            traces = [run_trace(plan, {obs_name: xu}, {}, params, noise,
                                temperature=cfg.temperature, relax=True,
                                straight_through=cfg.straight_through,
                                shared=shared)
                      for _ in range(cfg.samples)]
            unsup_vals = obj.elbo_unsupervised(traces, analytic_kl_for=kl_vars)

        sup_vals = None
        if s_idx is not None and len(s_idx):
            xs = sup_set.features[s_idx]
            ys = _one_hot(sup_set.labels[s_idx], k_label)
            shared = {}
            traces = [run_trace(plan, {obs_name: xs}, {label_var: ys}, params,
                                noise, temperature=cfg.temperature, relax=True,
                                straight_through=cfg.straight_through,
                                shared=shared)
                      for _ in range(cfg.samples)]
            sup_vals = _supervised_value(traces, cfg)

        total = obj.combined_objective(
            unsup_vals, sup_vals, cfg.gamma,
            n_scale=n_total if unsup_vals is not None else None,
            m_scale=m_total if sup_vals is not None else None)

        unsup_mean = float(np.mean(unsup_vals.data)) if unsup_vals is not None else 0.0
        sup_mean = float(np.mean(sup_vals.data)) if sup_vals is not None else 0.0
        value = total.item()
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"objective non-finite at epoch {epoch} step {steps}: "
                f"total={value}, unsup_mean={unsup_mean}, sup_mean={sup_mean}")

        loss = T.negate(total)
        T.backward(loss)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adam_step(params, grads, opt_state, lr=config.lr)
        zero_grads(params)

        tot_obj += value
        tot_sup += sup_mean
        tot_unsup += unsup_mean
        steps += 1

    if steps == 0:
        raise ContractError("epoch produced no steps")
    return EpochMetrics(objective=tot_obj / steps, sup_term=tot_sup / steps,
                        unsup_term=tot_unsup / steps,
                        seconds=time.perf_counter() - t0, steps=steps)


# ---------------------------------------------------------------------------
# evaluation

def label_logits(plan: ExecutionPlan, params: Mapping[str, Tensor], x: np.ndarray,
                 n_samples: int = 100, seed: int = 0) -> np.ndarray:
    """q(y|x) logits, averaged over samples of any latent recognition parents."""
    label_var = _label_variable(plan)
    spec = plan.graph.spec(label_var)
    parents_observed = all(plan.graph.spec(p).supervision == "observed"
                           for p in spec.recognition_parents)
    reps = 1 if parents_observed else max(1, n_samples)
    noise = NoiseStream([seed, 77])
    acc = None
    for _ in range(reps):
        trace = run_trace(plan, {plan.graph.observed[0]: x}, {}, params, noise,
                          relax=False)
        logits = trace.rec_params[label_var].logits.data
        acc = logits.copy() if acc is None else acc + logits
    return acc / reps


def classify(plan: ExecutionPlan, params: Mapping[str, Tensor], x: np.ndarray,
             n_samples: int = 100, seed: int = 0) -> np.ndarray:
    """argmax of the (sample-averaged) label logits; exact, no relaxation."""
    return np.argmax(label_logits(plan, params, x, n_samples, seed), axis=1)


def error_rate(plan: ExecutionPlan, params: Mapping[str, Tensor],
               test_set: Dataset, n_samples: int = 100, seed: int = 0,
               batch: int = 2000) -> float:
    """Mean 0/1 loss of classify over a labeled dataset."""
    if test_set.labels is None:
        raise ContractError("error_rate needs labels")
    wrong = 0
    for start in range(0, len(test_set), batch):
        xs = test_set.features[start:start + batch]
        ys = test_set.labels[start:start + batch]
        pred = classify(plan, params, xs, n_samples, seed)
        wrong += int(np.sum(pred != ys))
    return wrong / len(test_set)


# ---------------------------------------------------------------------------
# checkpoints: versioned header, model digest, shape-prefixed f64 tensors

CHECKPOINT_MAGIC = b"SGVAECKP"
CHECKPOINT_VERSION = 1


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise LengthError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_array(r: _Reader) -> tuple[str, np.ndarray]:
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode("utf-8")
    (ndim,) = r.unpack("<B")
    shape = r.unpack(f"<{ndim}I")
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
    return name, arr


def save_checkpoint(path, digest: str, params: Mapping[str, Tensor],
                    opt_state: AdamState | None = None) -> None:
    names = sorted(params)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(bytes.fromhex(digest))
    buf.write(struct.pack("<I", len(names)))
    for n in names:
        buf.write(_pack_array(n, params[n].data))
    if opt_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", opt_state.step))
        for n in names:
            buf.write(_pack_array(n, opt_state.m[n]))
            buf.write(_pack_array(n, opt_state.v[n]))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[str, dict[str, Tensor], AdamState | None]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32).hex()
    (count,) = r.unpack("<I")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name, arr = _read_array(r)
        params[name] = Tensor(arr)
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        (step,) = r.unpack("<Q")
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_array(r)
            m[name] = arr
            name2, arr2 = _read_array(r)
            v[name2] = arr2
        opt = AdamState(m=m, v=v, step=step)
    return digest, params, opt


def spec_digest_bytes_ok(digest: str) -> bool:
    try:
        return len(bytes.fromhex(digest)) == 32
    except ValueError:
        return False


def metrics_header() -> list[str]:
    return ["epoch", "step", "objective", "sup_term", "unsup_term",
            "test_error", "seconds"]


def params_fingerprint(params: Mapping[str, Tensor]) -> str:
    """Order-independent hash of all parameter bytes (for determinism tests)."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()
