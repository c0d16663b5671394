"""Auxiliary temporal prediction over consecutive slices.

A node's last interaction inside a slice is an event. The conditional
intensity is exponential-affine in the node state and the elapsed time,

    lambda*(t) = exp(w.h + omega * (t - t_prev) + b),

which gives the closed-form log density of the next event

    log f*(t) = w.h + omega*tau + b
                + (1/omega) * exp(w.h + b)
                - (1/omega) * exp(w.h + omega*tau + b),      tau = t - t_prev.

Event times are expressed in slice-length units so omega*tau stays O(1).
Exponents are clamped at EXP_CAP before exponentiation; clamp events are
counted so training can report them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataset import InteractionLog
from .errors import ContractError
from .model import SliceStates

EXP_CAP = 50.0

_clamp_events = 0


def clamp_count() -> int:
    return _clamp_events


def reset_clamp_count() -> None:
    global _clamp_events
    _clamp_events = 0


def init_tpp_params(d: int, rng: np.random.Generator) -> dict:
    """Trainable intensity parameters for both sides; omega starts at +0.1."""
    scale = 1.0 / np.sqrt(d)
    params = {}
    for side in ("user", "item"):
        params[f"tpp.{side}.w"] = ad.tensor(rng.uniform(-scale, scale, size=(d, 1)), requires_grad=True)
        params[f"tpp.{side}.omega"] = ad.tensor([[0.1]], requires_grad=True)
        params[f"tpp.{side}.b"] = ad.tensor([[0.0]], requires_grad=True)
    for name, p in params.items():
        p.name = name
    return params


@dataclass
class EventTimes:
    """Per node and slice, the time of its last interaction (NaN = inactive),
    in slice-length units."""

    user_times: np.ndarray  # (M, T) float64
    item_times: np.ndarray  # (N, T)


def extract_event_times(log: InteractionLog) -> EventTimes:
    if not log.sliced:
        raise ContractError("assign slices before extracting event times")
    ut = np.full((log.num_users, log.slice_count), np.nan)
    it = np.full((log.num_items, log.slice_count), np.nan)
    np.fmax.at(ut, (log.users, log.slices), log.times.astype(np.float64))
    np.fmax.at(it, (log.items, log.slices), log.times.astype(np.float64))
    return EventTimes(user_times=ut / log.slice_seconds, item_times=it / log.slice_seconds)


def _check_omega(params: dict, side: str) -> None:
    if params[f"tpp.{side}.omega"].values[0, 0] == 0.0:
        raise ContractError("omega must be nonzero (closed form divides by it)")


def log_density(h: ad.Tensor, t_prev, t_next, params: dict, side: str) -> ad.Tensor:
    """log f*(t_next | h, t_prev) for a batch of nodes; shape (n, 1)."""
    global _clamp_events
    _check_omega(params, side)
    t_prev = np.asarray(t_prev, dtype=np.float64).reshape(-1, 1)
    t_next = np.asarray(t_next, dtype=np.float64).reshape(-1, 1)
    tau = t_next - t_prev
    if np.any(tau < 0):
        raise ContractError("t_next must not precede t_prev")

    w = params[f"tpp.{side}.w"]
    omega = params[f"tpp.{side}.omega"]
    b = params[f"tpp.{side}.b"]
    c = ad.add(ad.matmul(h, w), b)                      # w.h + b, (n, 1)
    om_tau = ad.mul(ad.tensor(tau), omega)              # omega * tau
    c_tau = ad.add(c, om_tau)

    _clamp_events += int(np.count_nonzero(c.values > EXP_CAP))
    _clamp_events += int(np.count_nonzero(c_tau.values > EXP_CAP))
    inv_omega = ad.reciprocal(omega)
    survival = ad.sub(ad.mul(ad.exp(ad.clip(c, hi=EXP_CAP)), inv_omega),
                      ad.mul(ad.exp(ad.clip(c_tau, hi=EXP_CAP)), inv_omega))
    return ad.add(c_tau, survival)


def log_intensity(h_values: np.ndarray, t_prev, t, params: dict, side: str) -> np.ndarray:
    """Forward-only log lambda*(t); used by tests and diagnostics."""
    _check_omega(params, side)
    w = params[f"tpp.{side}.w"].values
    omega = params[f"tpp.{side}.omega"].values[0, 0]
    b = params[f"tpp.{side}.b"].values[0, 0]
    tau = np.asarray(t, dtype=np.float64) - np.asarray(t_prev, dtype=np.float64)
    return (h_values @ w).ravel() + omega * tau + b


def _side_terms(state_list, times: np.ndarray, params: dict, side: str, nodes):
    terms = []
    num_slices = len(state_list)
    for s in range(num_slices - 1):
        present = ~np.isnan(times[nodes, s]) & ~np.isnan(times[nodes, s + 1])
        idx = nodes[present]
        if idx.size == 0:
            continue
        h = ad.gather_rows(state_list[s], idx)
        lf = log_density(h, times[idx, s], times[idx, s + 1], params, side)
        terms.append(ad.sum_all(lf))
    return terms


def aux_loss(states: SliceStates, events: EventTimes, params: dict,
             users=None, items=None) -> ad.Tensor:
    """Negative log-likelihood of the next-slice event times, summed over the
    given nodes (defaults to all); node terms with a missing event on either
    side of a slice pair are skipped."""
    M = states.final_user.shape[0]
    N = states.final_item.shape[0]
    users = np.arange(M, dtype=np.intp) if users is None else np.unique(np.asarray(users, dtype=np.intp))
    items = np.arange(N, dtype=np.intp) if items is None else np.unique(np.asarray(items, dtype=np.intp))
    terms = _side_terms(states.user_states, events.user_times, params, "user", users)
    terms += _side_terms(states.item_states, events.item_times, params, "item", items)
    if not terms:
        return ad.tensor([[0.0]])
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.neg(total)


def predictive_nll(states: SliceStates, events: EventTimes, params: dict,
                   target_slice: int) -> float:
    """Mean negative log density of the target-slice event times given the
    final history states; evaluation-only diagnostic."""
    total = 0.0
    count = 0
    for state, times in ((states.final_user, events.user_times), (states.final_item, events.item_times)):
        prev_t = times[:, target_slice - 1]
        next_t = times[:, target_slice]
        idx = np.where(~np.isnan(prev_t) & ~np.isnan(next_t))[0]
        if idx.size == 0:
            continue
        side = "user" if state is states.final_user else "item"
        h = ad.gather_rows(state, idx)
        lf = log_density(h, prev_t[idx], next_t[idx], params, side)
        total -= float(lf.values.sum())
        count += idx.size
    return total / count if count else float("nan")
