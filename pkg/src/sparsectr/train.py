"""Adam, the training loop, AUC and RelaImpr."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import ListwiseSample
from .model import ModelConfig, ModelParams, collate, forward, loss, predict

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss became NaN or infinite."""


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores share their mean rank."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rela_impr(auc_model: float, auc_base: float) -> float:
    """Relative improvement in percent of the AUC excess over 0.5."""
    if auc_base <= 0.5:
        raise ValueError(f"RelaImpr is undefined for a baseline AUC <= 0.5 (got {auc_base})")
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; missing grads count as zero."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    eval_every: int = 0
    log_every: int = 50


@dataclass
class TrainResult:
    params: ModelParams
    rows: list[dict] = field(default_factory=list)  # step, loss, eval_auc

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "loss", "eval_auc"])
            w.writeheader()
            for r in self.rows:
                w.writerow({"step": r["step"], "loss": repr(r["loss"]),
                            "eval_auc": "" if r.get("eval_auc") is None else repr(r["eval_auc"])})


def train(samples: list[ListwiseSample], cfg: ModelConfig, hyper: TrainHyper,
          eval_samples: list[ListwiseSample] | None = None, params: ModelParams | None = None) -> TrainResult:
    """Mini-batch Adam over shuffled samples; everything is seeded by ``hyper.seed``."""
    if not samples:
        raise ValueError("training set is empty")
    params = params or ModelParams.init(cfg, seed=hyper.seed)
    named = params.named()
    state = AdamState()
    rng = np.random.default_rng([hyper.seed, 7])
    result = TrainResult(params)
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(samples))
        log.info("epoch %d: %d samples, shuffle seed %d", epoch, len(samples), hyper.seed)
        for start in range(0, len(order), hyper.batch_size):
            batch = collate([samples[i] for i in order[start:start + hyper.batch_size]], cfg)
            T.zero_grads(named.values())
            value = loss(forward(batch, params, cfg), batch.labels)
            if not math.isfinite(value.item()):
                raise TrainingDiverged(f"loss is {value.item()} at step {step} (epoch {epoch}); "
                                       f"try a smaller learning rate than {hyper.lr}")
            value.backward()
            adam_step(named, {k: p.grad for k, p in named.items() if p.grad is not None}, state, hyper.lr)
            step += 1
            row = {"step": step, "loss": value.item(), "eval_auc": None}
            if eval_samples and hyper.eval_every and step % hyper.eval_every == 0:
                row["eval_auc"] = evaluate(eval_samples, params, cfg)
            result.rows.append(row)
            if hyper.log_every and step % hyper.log_every == 0:
                recent = [r["loss"] for r in result.rows[-hyper.log_every:]]
                log.info("step %d loss %.4f", step, float(np.mean(recent)))
    if eval_samples:
        result.rows[-1]["eval_auc"] = evaluate(eval_samples, params, cfg)
    return result


def evaluate(samples: list[ListwiseSample], params: ModelParams, cfg: ModelConfig) -> float:
    scores = predict(samples, params, cfg)
    return auc(np.concatenate(scores), np.concatenate([s.labels for s in samples]))
