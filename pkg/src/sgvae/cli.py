"""Command-line entry point: train, eval, verify, generate.

Every run writes a manifest (resolved configuration, model digest, seeds,
artifact paths) before any work starts, sufficient to reproduce it exactly.

Exit codes: 0 success; 1 verification failures; 2 invalid input
(spec/data/checkpoint); 3 non-finite training objective.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import data as D
from . import model as M
from . import objective as O
from . import oracle
from . import train as TR
from .errors import SgvaeError, TrainingDiverged
from .objective import ObjectiveConfig
from .train import TrainConfig


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (SgvaeError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgvae", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON spec")
    t.add_argument("--model", required=True, help="model spec (JSON)")
    t.add_argument("--data-dir", default=None, help="dataset root (or SGVAE_DATA_DIR)")
    t.add_argument("--labeled", type=int, default=100, metavar="M",
                   help="number of supervised data points")
    t.add_argument("--unlabeled", type=int, default=None, metavar="N",
                   help="cap on unsupervised points (default: all remaining)")
    t.add_argument("--gamma", type=float, default=1.0)
    t.add_argument("--alpha", default="auto",
                   help="label-term weight; 'auto' = 0.1/rho")
    t.add_argument("--samples", type=int, default=8, metavar="S")
    t.add_argument("--variant", choices=O.VARIANTS, default="snis")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-unsup", type=int, default=200)
    t.add_argument("--batch-sup", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--temperature", type=float, default=M.DEFAULT_TEMPERATURE)
    t.add_argument("--analytic-kl", action="store_true")
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--target-error", type=float, default=None,
                   help="stop early once test error reaches this level")
    t.add_argument("--out-dir", default="runs/latest")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="classification error of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--data-dir", default=None)
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.add_argument("--samples", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("verify", help="estimator verification against enumeration")
    v.add_argument("--samples", type=int, default=50_000, metavar="S")
    v.add_argument("--seeds", type=int, default=20)
    v.add_argument("--alpha", type=float, default=0.5)
    v.add_argument("--seed", type=int, default=20240)
    v.add_argument("--s-sweep", default="1,100,10000",
                   help="comma-separated S values for the bias sweep ('' disables)")
    v.add_argument("--out-csv", default=None)
    v.set_defaults(fn=cmd_verify)

    g = sub.add_parser("generate", help="conditional generation grids (PGM)")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--data-dir", default=None)
    g.add_argument("--mode", choices=["analogy", "style-sweep"], required=True)
    g.add_argument("--indices", default="0,1,2,3,4,5,6,7",
                   help="test-set indices for analogy inputs")
    g.add_argument("--digit", type=int, default=0, help="fixed label for style-sweep")
    g.add_argument("--grid-size", type=int, default=7)
    g.add_argument("--z-range", type=float, default=2.0)
    g.add_argument("--samples", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output PGM path")
    g.set_defaults(fn=cmd_generate)
    return p


# ---------------------------------------------------------------------------
# train

def _resolve_alpha(alpha_flag, rho: float) -> float:
    if isinstance(alpha_flag, str) and alpha_flag.strip().lower() == "auto":
        return O.alpha_for_rate(rho)
    return float(alpha_flag)


def cmd_train(args) -> int:
    graph = M.load_model_spec(args.model)
    digest = M.model_digest(graph)
    plan = M.compile_model(graph, init_seed=args.seed)
    print(f"model: {args.model} (digest {digest[:12]})")
    print(f"recognition order: {list(plan.recognition_order)}")
    print(f"generative order:  {list(plan.generative_order)}")

    data_dir = D.resolve_data_dir(args.data_dir)
    full = D.load_mnist(data_dir, "train")
    test = D.load_mnist(data_dir, "test")
    seeds = np.random.SeedSequence(args.seed).generate_state(4).tolist()
    train_pool, _validation = D.holdout_split(full, 10_000, seed=seeds[2])
    split = D.split_semi_supervised(train_pool, args.labeled, seed=seeds[2],
                                    n_unsup=args.unlabeled)
    n, m = len(split.unsupervised), len(split.supervised)
    rho = O.supervision_rate(n, m, args.gamma)
    alpha = _resolve_alpha(args.alpha, rho)
    print(f"N={n} M={m} gamma={args.gamma} rho={rho:.6g} alpha={alpha:.6g}")

    cfg = TrainConfig(
        epochs=args.epochs, batch_unsup=args.batch_unsup, batch_sup=args.batch_sup,
        objective=ObjectiveConfig(samples=args.samples, alpha=alpha,
                                  gamma=args.gamma, variant=args.variant,
                                  analytic_kl=args.analytic_kl,
                                  temperature=args.temperature),
        lr=args.lr, seed=args.seed, eval_every=args.eval_every)

    os.makedirs(args.out_dir, exist_ok=True)
    paths = {k: os.path.join(args.out_dir, v) for k, v in
             [("manifest", "manifest.json"), ("metrics", "metrics.csv"),
              ("checkpoint", "checkpoint.bin")]}
    manifest = {
        "created": datetime.now(timezone.utc).isoformat(),
        "command": "train",
        "model_spec": os.path.abspath(args.model),
        "model_digest": digest,
        "data": {"dir": os.path.abspath(data_dir), "n_unsup": n, "m_sup": m,
                 "validation_holdout": len(_validation)},
        "hyper": {"gamma": args.gamma, "alpha": alpha, "rho": rho,
                  "samples": args.samples, "variant": args.variant,
                  "epochs": args.epochs, "batch_unsup": args.batch_unsup,
                  "batch_sup": args.batch_sup, "lr": args.lr,
                  "temperature": args.temperature,
                  "analytic_kl": bool(args.analytic_kl),
                  "target_error": args.target_error},
        "seeds": {"root": args.seed, "derived": seeds},
        "artifacts": {k: os.path.abspath(v) for k, v in paths.items()},
    }
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)

    params = plan.init_params()
    opt = TR.AdamState.for_params(params)
    rows = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        met = TR.train_epoch(plan, params, split.supervised, split.unsupervised,
                             cfg, opt, epoch)
        test_err = ""
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            err = TR.error_rate(plan, params, test,
                                n_samples=cfg.objective.eval_samples, seed=args.seed)
            test_err = f"{err:.4f}"
        rows.append([epoch, met.steps, f"{met.objective:.6g}", f"{met.sup_term:.6g}",
                     f"{met.unsup_term:.6g}", test_err, f"{met.seconds:.2f}"])
        print(f"epoch {epoch:3d}  objective {met.objective:.6g}  "
              f"sup {met.sup_term:.4f}  unsup {met.unsup_term:.4f}  "
              f"test_error {test_err or '-'}  ({met.seconds:.1f}s)")
        _write_metrics(paths["metrics"], rows)
        TR.save_checkpoint(paths["checkpoint"], digest, params, opt)
        if (args.target_error is not None and test_err
                and float(test_err) <= args.target_error):
            print(f"target error {args.target_error} reached; stopping early")
            break
    print(f"done in {time.perf_counter() - t0:.1f}s; artifacts in {args.out_dir}")
    return 0


def _write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TR.metrics_header())
        w.writerows(rows)


# ---------------------------------------------------------------------------
# eval

def _load_checkpoint_for(args) -> tuple:
    graph = M.load_model_spec(args.model)
    digest = M.model_digest(graph)
    ck_digest, params, _opt = TR.load_checkpoint(args.checkpoint)
    if ck_digest != digest:
        raise SgvaeError(f"checkpoint digest {ck_digest[:12]} does not match "
                         f"model spec digest {digest[:12]}")
    plan = M.compile_model(graph, init_seed=args.seed)
    return plan, params


def cmd_eval(args) -> int:
    plan, params = _load_checkpoint_for(args)
    test = D.load_mnist(D.resolve_data_dir(args.data_dir), args.split)
    err = TR.error_rate(plan, params, test, n_samples=args.samples, seed=args.seed)
    se = float(np.sqrt(err * (1.0 - err) / len(test)))
    print(f"classification error on {args.split}: {err:.4f} (+/- {se:.4f} binomial se, "
          f"n={len(test)})")
    print(f"test_error={err:.6f}")
    return 0


# ---------------------------------------------------------------------------
# verify

def cmd_verify(args) -> int:
    sweep = None
    if args.s_sweep.strip():
        sweep = tuple(int(x) for x in args.s_sweep.split(",") if x.strip())
    report = oracle.run_verification(s=args.samples, n_seeds=args.seeds,
                                     alpha=args.alpha, seed=args.seed,
                                     s_sweep=sweep)
    print(report.to_text())
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        print(f"report written to {args.out_csv}")
    return 0 if report.all_passed else 1


# ---------------------------------------------------------------------------
# generate

def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8).tobytes())


def tile_grid(tiles: np.ndarray, rows: int, cols: int, tile_hw: tuple[int, int],
              sep: int = 2, sep_value: float = 0.5) -> np.ndarray:
    th, tw = tile_hw
    out = np.full((rows * th + (rows - 1) * sep,
                   cols * tw + (cols - 1) * sep), sep_value)
    k = 0
    for r in range(rows):
        for c in range(cols):
            y, x = r * (th + sep), c * (tw + sep)
            out[y:y + th, x:x + tw] = tiles[k].reshape(th, tw)
            k += 1
    return out


def _decode_mean(plan, params, y_onehot: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Bernoulli mean of p(x | y, z) for given label one-hots and styles."""
    from .model import _to_dist_params  # decoder parameters of the observed node
    from .tensor import as_tensor
    graph = plan.graph
    x_name = graph.observed[0]
    spec = graph.spec(x_name)
    inputs = []
    for p in spec.generative_parents:
        fam = graph.spec(p).family
        inputs.append(as_tensor(y_onehot if fam == "categorical" else z))
    raw = plan.eta_fns[x_name](inputs, params, y_onehot.shape[0])
    dp = _to_dist_params(spec, raw)
    return 1.0 / (1.0 + np.exp(-dp.logits.data))


def infer_style(plan, params, x: np.ndarray, y_onehot: np.ndarray) -> np.ndarray:
    """Posterior mean of the style latent under q(z | x, y)."""
    from .model import NoiseStream, run_trace
    noise = NoiseStream(0)
    trace = run_trace(plan, {plan.graph.observed[0]: x},
                      {plan.graph.partial[0]: y_onehot}, params, noise, relax=False)
    z_name = plan.graph.latent[0]
    return trace.rec_params[z_name].mean.data


def cmd_generate(args) -> int:
    plan, params = _load_checkpoint_for(args)
    graph = plan.graph
    label_var = graph.partial[0]
    k = graph.spec(label_var).dim
    x_dim = graph.spec(graph.observed[0]).dim
    side = int(round(x_dim ** 0.5))
    if side * side != x_dim:
        raise SgvaeError("generation needs square image observations")

    if args.mode == "analogy":
        test = D.load_mnist(D.resolve_data_dir(args.data_dir), "test")
        idx = [int(i) for i in args.indices.split(",") if i.strip()]
        x = test.features[idx]
        pred = TR.classify(plan, params, x, n_samples=args.samples, seed=args.seed)
        y_hat = np.zeros((len(idx), k))
        y_hat[np.arange(len(idx)), pred] = 1.0
        z = infer_style(plan, params, x, y_hat)
        tiles = []
        for i in range(len(idx)):
            tiles.append(x[i])
            for digit in range(k):
                y = np.zeros((1, k))
                y[0, digit] = 1.0
                tiles.append(_decode_mean(plan, params, y, z[i:i + 1])[0])
        grid = tile_grid(np.array(tiles), rows=len(idx), cols=k + 1,
                         tile_hw=(side, side))
    else:
        g = args.grid_size
        span = np.linspace(-args.z_range, args.z_range, g)
        z_dim = graph.spec(graph.latent[0]).dim
        tiles = []
        y = np.zeros((1, k))
        y[0, args.digit % k] = 1.0
        for a in span:
            for b in span:
                z = np.zeros((1, z_dim))
                z[0, 0] = a
                if z_dim > 1:
                    z[0, 1] = b
                tiles.append(_decode_mean(plan, params, y, z)[0])
        grid = tile_grid(np.array(tiles), rows=g, cols=g, tile_hw=(side, side))

    write_pgm(args.out, grid)
    print(f"wrote {args.out} ({grid.shape[1]}x{grid.shape[0]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
