"""Joint optimization of the ranking loss and the temporal auxiliary loss.

Training examples slide over the training slices: for every history end s
(targets must stay inside the training slices) each interaction in slice
s+1 yields one positive plus uniformly sampled negatives the user did not
touch in that slice. Each step recomputes the slice states for history
0..s, takes one Adam step on bce + beta * tpp_nll with L2 applied through
the optimizer's weight-decay path, clips gradients at a global norm, and
model selection tracks validation NDCG@10 with early stopping.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import evaluation, model as model_mod, tpp as tpp_mod
from .dataset import InteractionLog, SliceSplit, split as make_split
from .errors import ConfigError, NumericalAbort
from .rng import stream


@dataclass
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 5e-4
    l2: float = 1e-4
    beta: float = 1e-3
    neg_per_pos_train: int = 1
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    window: str = "sliding"      # or "fixed": only the longest history
    min_history: int = 0         # smallest history end slice
    clip_norm: float = 5.0
    eval_k: int = 10
    eval_negatives: int = 100

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.neg_per_pos_train < 1:
            raise ConfigError("neg_per_pos_train must be >= 1")
        if self.window not in ("sliding", "fixed"):
            raise ConfigError(f"unknown window {self.window!r}")
        return self


@dataclass
class Batch:
    history_end: int             # graphs 0..history_end are visible
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray           # 1.0 positive, 0.0 negative

    def __len__(self):
        return self.users.size


def make_training_examples(log: InteractionLog, split: SliceSplit, cfg: TrainConfig,
                           rng: np.random.Generator) -> list:
    """One epoch of shuffled batches; target slice for history end s is s+1."""
    T = log.slice_count
    last_history_end = T - 4  # target T-3 is the last training slice
    if cfg.window == "fixed":
        ends = [last_history_end] if last_history_end >= cfg.min_history else []
    else:
        ends = list(range(cfg.min_history, last_history_end + 1))

    batches = []
    for s in ends:
        target = s + 1
        mask = log.slices == target
        pos_users = log.users[mask]
        pos_items = log.items[mask]
        if pos_users.size == 0:
            continue
        seen_by_user = {}
        for u in np.unique(pos_users):
            seen = np.unique(pos_items[pos_users == u])
            seen_by_user[int(u)] = np.setdiff1d(np.arange(log.num_items), seen)

        k = cfg.neg_per_pos_train
        users = np.repeat(pos_users, 1 + k)
        items = np.empty(pos_users.size * (1 + k), dtype=np.int64)
        labels = np.zeros(users.size)
        for p, (u, i) in enumerate(zip(pos_users, pos_items)):
            base = p * (1 + k)
            items[base] = i
            labels[base] = 1.0
            allowed = seen_by_user[int(u)]
            items[base + 1:base + 1 + k] = allowed[rng.integers(0, allowed.size, size=k)]

        order = rng.permutation(users.size)
        users, items, labels = users[order], items[order], labels[order]
        for start in range(0, users.size, cfg.batch_size):
            end = start + cfg.batch_size
            batches.append(Batch(s, users[start:end], items[start:end], labels[start:end]))
    if not batches:
        raise ConfigError(f"no training positives available (T={T}, window={cfg.window})")
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def bce_loss(y_hat: ad.Tensor, labels) -> ad.Tensor:
    """Mean cross-entropy; predictions clamped to [1e-12, 1 - 1e-12]."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    p = ad.clip(y_hat, 1e-12, 1.0 - 1e-12)
    pos = ad.mul(ad.tensor(y), ad.log(p))
    neg = ad.mul(ad.tensor(1.0 - y), ad.log(ad.sadd(ad.neg(p), 1.0)))
    return ad.neg(ad.mean_all(ad.add(pos, neg)))


def batch_loss(batch: Batch, slice_graphs, events, params, config: model_mod.ModelConfig,
               beta: float, training: bool = False, rng=None):
    """Loss tensor plus the detached (bce, tpp) component values."""
    states = model_mod.forward_all(slice_graphs, params, config,
                                   num_history=batch.history_end + 1,
                                   training=training, rng=rng)
    y_hat = model_mod.predict(batch.users, batch.items, states, params, config,
                              training=training, rng=rng)
    loss = bce_loss(y_hat, batch.labels)
    bce_value = loss.item()
    tpp_value = 0.0
    if beta > 0.0:
        aux = tpp_mod.aux_loss(states, events, params, users=batch.users, items=batch.items)
        tpp_value = aux.item()
        loss = ad.add(loss, ad.smul(aux, beta))
    return loss, bce_value, tpp_value


def _param_norms(params: dict) -> dict:
    return {name: float(np.linalg.norm(p.values)) for name, p in params.items()}


def train(log: InteractionLog, slice_graphs, params: dict,
          config: model_mod.ModelConfig, cfg: TrainConfig,
          out_dir=None, log_fh=None) -> dict:
    """Run the optimization loop; leaves the best-validation weights in
    ``params`` and returns the epoch records plus bookkeeping."""
    cfg.validate()
    split = make_split(log)
    events = tpp_mod.extract_event_times(log)
    adam = ad.AdamState(params, learning_rate=cfg.learning_rate)
    tpp_mod.reset_clamp_count()

    best = {"ndcg": -1.0, "epoch": -1, "params": None, "adam": None}
    records = []
    stale = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        sampler = stream(cfg.seed, "sampling", epoch)
        sum_loss = sum_bce = sum_tpp = 0.0
        batches = make_training_examples(log, split, cfg, sampler)
        for batch in batches:
            drop_rng = stream(cfg.seed, "dropout", step)
            with ad.Tape() as tape:
                loss, bce_v, tpp_v = batch_loss(batch, slice_graphs, events, params,
                                                config, cfg.beta, training=True, rng=drop_rng)
            loss_v = loss.item()
            if not np.isfinite(loss_v):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} step {step}",
                    diagnostics={
                        "epoch": epoch, "step": step,
                        "history_end": batch.history_end,
                        "batch_users": batch.users.tolist(),
                        "batch_items": batch.items.tolist(),
                        "param_norms": _param_norms(params),
                    },
                )
            tape.backward(loss, params=params.values())
            ad.clip_global_norm(params, cfg.clip_norm)
            ad.adam_step(params, adam, weight_decay=cfg.l2)
            ad.zero_grads(params)
            sum_loss += loss_v
            sum_bce += bce_v
            sum_tpp += tpp_v
            step += 1

        val = evaluation.evaluate(log, split, slice_graphs, params, config,
                                  target="valid", seed=cfg.seed, k=cfg.eval_k,
                                  negatives_per_case=cfg.eval_negatives)
        record = {
            "epoch": epoch,
            "train_loss": sum_loss / len(batches),
            "train_bce": sum_bce / len(batches),
            "train_tpp": sum_tpp / len(batches),
            "val_hr10": val.hr_at_k,
            "val_ndcg10": val.ndcg_at_k,
            "val_mrr": val.mrr,
            "seconds": time.perf_counter() - t0,
        }
        records.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()

        if val.ndcg_at_k > best["ndcg"]:
            best.update(
                ndcg=val.ndcg_at_k, epoch=epoch,
                params={name: p.values.copy() for name, p in params.items()},
                adam={"step": adam.step,
                      "m": {n: m.copy() for n, m in adam.m.items()},
                      "v": {n: v.copy() for n, v in adam.v.items()}},
            )
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break

    if best["params"] is not None:
        for name, p in params.items():
            p.values = best["params"][name]
        adam.step = best["adam"]["step"]
        adam.m = best["adam"]["m"]
        adam.v = best["adam"]["v"]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ad.save_params(os.path.join(out_dir, "params.bin"), params)
        ad.save_optimizer(os.path.join(out_dir, "optimizer.bin"), adam)
    return {
        "best_epoch": best["epoch"],
        "best_val_ndcg10": best["ndcg"],
        "epochs_run": len(records),
        "records": records,
        "tpp_clamps": tpp_mod.clamp_count(),
    }
