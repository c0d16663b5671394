"""Interaction log ingestion, timeline slicing, and slice-level splits.

Input format: UTF-8 text, one interaction per line,
``user_id<TAB>item_id<TAB>timestamp`` (integer seconds, >= 0); lines
starting with ``#`` are ignored. Users/items with too few interactions are
removed until a fixpoint, surviving IDs are densely re-indexed, and the
timeline is cut into T equal-length slices.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError

FORMAT_VERSION = 1
_RECORD_DTYPE = np.dtype([("user", "<u4"), ("item", "<u4"), ("time", "<i8")])


@dataclass
class InteractionLog:
    """Timestamp-sorted (user, item, time) triplets with dense indices."""

    users: np.ndarray          # int64, values in [0, num_users)
    items: np.ndarray          # int64, values in [0, num_items)
    times: np.ndarray          # int64 seconds
    num_users: int
    num_items: int
    min_interactions: int = 1
    # set by assign_slices
    slice_count: int = 0
    slice_seconds: int = 0
    t_min: int = 0
    slices: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.users.size

    @property
    def sliced(self) -> bool:
        return self.slice_count > 0


@dataclass(frozen=True)
class SliceSplit:
    """Slice-index split: all but the last two slices train, then valid, test."""

    train_slices: range
    valid_slice: int
    test_slice: int


def _parse_line(line: str, line_no: int):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3:
        raise ParseError(f"expected 'user<TAB>item<TAB>timestamp', got {line.rstrip()!r}", line_no)
    user, item, raw_t = parts
    if not user or not item:
        raise ParseError("empty user or item id", line_no)
    try:
        t = int(raw_t)
    except ValueError:
        raise ParseError(f"timestamp {raw_t!r} is not an integer", line_no) from None
    if t < 0:
        raise ParseError(f"negative timestamp {t}", line_no)
    return user, item, t


def ingest(path, min_interactions: int = 5) -> InteractionLog:
    """Load a triplet file, filter sparse users/items to a fixpoint, re-index.

    Filtering repeats until stable because removing an item can drop one of
    its users below the threshold (and vice versa).
    """
    if min_interactions < 1:
        raise ContractError(f"min_interactions must be >= 1, got {min_interactions}")
    raw_users, raw_items, times = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            user, item, t = _parse_line(line, line_no)
            raw_users.append(user)
            raw_items.append(item)
            times.append(t)
    return _build_log(raw_users, raw_items, np.asarray(times, dtype=np.int64), min_interactions)


def _build_log(raw_users, raw_items, times, min_interactions) -> InteractionLog:
    keep = np.ones(len(raw_users), dtype=bool)
    raw_users = np.asarray(raw_users, dtype=object)
    raw_items = np.asarray(raw_items, dtype=object)
    while True:
        u_sel, u_counts = np.unique(raw_users[keep], return_counts=True)
        i_sel, i_counts = np.unique(raw_items[keep], return_counts=True)
        ok_users = set(u_sel[u_counts >= min_interactions])
        ok_items = set(i_sel[i_counts >= min_interactions])
        new_keep = np.fromiter(
            (u in ok_users and i in ok_items for u, i in zip(raw_users, raw_items)),
            dtype=bool, count=len(raw_users),
        ) & keep
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    if not keep.any():
        raise ContractError("no interactions survive the sparsity filter")

    surviving_users = sorted({u for u in raw_users[keep]})
    surviving_items = sorted({i for i in raw_items[keep]})
    user_index = {u: k for k, u in enumerate(surviving_users)}
    item_index = {i: k for k, i in enumerate(surviving_items)}

    users = np.array([user_index[u] for u in raw_users[keep]], dtype=np.int64)
    items = np.array([item_index[i] for i in raw_items[keep]], dtype=np.int64)
    times = np.asarray(times, dtype=np.int64)[keep]

    order = np.argsort(times, kind="stable")  # ties keep input order
    return InteractionLog(
        users=users[order], items=items[order], times=times[order],
        num_users=len(surviving_users), num_items=len(surviving_items),
        min_interactions=min_interactions,
    )


def from_triplets(triplets, min_interactions: int = 1) -> InteractionLog:
    """Build a log from in-memory (user_id, item_id, timestamp) triplets."""
    if not triplets:
        raise ContractError("no interactions given")
    raw_users = [str(u) for u, _, _ in triplets]
    raw_items = [str(i) for _, i, _ in triplets]
    times = np.array([int(t) for _, _, t in triplets], dtype=np.int64)
    if times.min() < 0:
        raise ContractError("timestamps must be >= 0")
    return _build_log(raw_users, raw_items, times, min_interactions)


def assign_slices(log: InteractionLog, num_slices: int) -> InteractionLog:
    """Cut the timeline into ``num_slices`` equal intervals and annotate
    every interaction with its slice index.

    The interval is ceil((t_max - t_min + 1) / T) so the last timestamp
    lands in slice T-1 and no trailing slice is empty by construction.
    """
    if num_slices < 3:
        raise ContractError(f"need at least 3 slices (train/valid/test), got {num_slices}")
    if len(log) == 0:
        raise ContractError("cannot slice an empty log")
    t_min = int(log.times.min())
    t_max = int(log.times.max())
    if t_max == t_min:
        raise ContractError("all timestamps are equal; timeline span is degenerate")
    slice_seconds = math.ceil((t_max - t_min + 1) / num_slices)
    slices = (log.times - t_min) // slice_seconds
    log.slice_count = num_slices
    log.slice_seconds = slice_seconds
    log.t_min = t_min
    log.slices = slices.astype(np.int64)
    return log


def split(log: InteractionLog) -> SliceSplit:
    if not log.sliced:
        raise ContractError("assign slices before splitting")
    T = log.slice_count
    return SliceSplit(train_slices=range(0, T - 2), valid_slice=T - 2, test_slice=T - 1)


# ---------------------------------------------------------------------------
# prepared-dataset directory: interactions.bin + manifest.json


def save(log: InteractionLog, out_dir) -> None:
    if not log.sliced:
        raise ContractError("assign slices before saving")
    os.makedirs(out_dir, exist_ok=True)
    records = np.empty(len(log), dtype=_RECORD_DTYPE)
    records["user"] = log.users
    records["item"] = log.items
    records["time"] = log.times
    with open(os.path.join(out_dir, "interactions.bin"), "wb") as fh:
        fh.write(records.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_users": log.num_users,
        "num_items": log.num_items,
        "num_interactions": len(log),
        "num_slices": log.slice_count,
        "slice_seconds": log.slice_seconds,
        "t_min": log.t_min,
        "min_interactions": log.min_interactions,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load(data_dir) -> InteractionLog:
    with open(os.path.join(data_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported dataset format version {manifest.get('format_version')}")
    with open(os.path.join(data_dir, "interactions.bin"), "rb") as fh:
        records = np.frombuffer(fh.read(), dtype=_RECORD_DTYPE)
    log = InteractionLog(
        users=records["user"].astype(np.int64),
        items=records["item"].astype(np.int64),
        times=records["time"].astype(np.int64),
        num_users=manifest["num_users"],
        num_items=manifest["num_items"],
        min_interactions=manifest["min_interactions"],
    )
    return assign_slices(log, manifest["num_slices"])
