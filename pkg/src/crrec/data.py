"""Interaction logs -> offline MDP dataset of transitions.

States are windows of the most recent positively-rewarded items, left-padded
with the PAD id 0. A positive reward shifts the window left and appends the
action; a zero reward leaves it unchanged.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError

PAD = 0
RATINGS_HEADER = ["userId", "itemId", "rating", "timestamp"]
SESSIONS_HEADER = ["sessionId", "timestamp", "itemId", "event"]
EVENTS = ("click", "purchase")
SPLIT_NAMES = ("train", "valid", "test")


def natural_key(s: str):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass(frozen=True)
class InteractionRecord:
    actor: str
    item: str
    feedback: float | str
    timestamp: int
    line: int = 0


@dataclass(frozen=True)
class RewardSpec:
    scheme: str = "rating"
    threshold: float = 3.5
    event_values: dict = field(default_factory=lambda: {"purchase": 3.0, "click": 1.0})

    def __post_init__(self):
        if self.scheme not in ("rating", "event"):
            raise ConfigError(f"unknown reward scheme {self.scheme!r}", field="reward.scheme")

    @property
    def values(self) -> set:
        return {0.0, 1.0} if self.scheme == "rating" else set(self.event_values.values())


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.99
    valid: float = 0.002
    test: float = 0.008

    def __post_init__(self):
        fr = (self.train, self.valid, self.test)
        if any(f <= 0 for f in fr):
            raise ConfigError(f"fractions must be positive, got {fr}", field="split")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must sum to 1, got {sum(fr)}", field="split")


class Catalog:
    """Bijection between raw item ids and internal ids ``1..I``."""

    def __init__(self, raw_ids: Sequence[str]):
        self.raw = list(raw_ids)
        self.index = {r: i + 1 for i, r in enumerate(self.raw)}
        if len(self.index) != len(self.raw):
            raise DataError("duplicate raw item ids in catalog")

    @classmethod
    def from_records(cls, records: Iterable[InteractionRecord]):
        return cls(sorted({r.item for r in records}, key=natural_key))

    def __len__(self):
        return len(self.raw)

    def to_internal(self, raw: str) -> int:
        try:
            return self.index[raw]
        except KeyError:
            raise DataError(f"item {raw!r} is not in the catalog") from None

    def to_raw(self, internal: int) -> str:
        if internal < 1:
            raise IndexError("internal id 0 is PAD")
        return self.raw[internal - 1]

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["internal_id", "raw_id"])
            for i, r in enumerate(self.raw, start=1):
                w.writerow([i, r])

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["internal_id", "raw_id"]:
            raise DataError("bad catalog header", location=f"{path}:1")
        raw = []
        for n, row in enumerate(rows[1:], start=2):
            if len(row) != 2 or row[0] != str(n - 1):
                raise DataError("catalog ids must be contiguous from 1", location=f"{path}:{n}")
            raw.append(row[1])
        return cls(raw)


@dataclass(frozen=True)
class Transition:
    state: tuple
    action: int
    reward: float
    next_state: tuple
    terminal: bool
    event: str = ""


class TransitionSet:
    """Column store of transitions plus the actor/timestamp needed for evaluation."""

    def __init__(self, states, actions, rewards, next_states, terminal, events=None,
                 actors=None, timestamps=None):
        self.states = np.asarray(states, dtype=np.int64)
        n = len(self.states)
        if self.states.ndim != 2:
            self.states = self.states.reshape(n, -1)
        self.actions = np.asarray(actions, dtype=np.int64).reshape(n)
        self.rewards = np.asarray(rewards, dtype=np.float64).reshape(n)
        self.next_states = np.asarray(next_states, dtype=np.int64).reshape(self.states.shape)
        self.terminal = np.asarray(terminal, dtype=bool).reshape(n)
        self.events = np.asarray([""] * n if events is None else events, dtype=object)
        self.actors = np.asarray(["0"] * n if actors is None else actors, dtype=object)
        self.timestamps = np.asarray(np.arange(n) if timestamps is None else timestamps, dtype=np.int64)

    @property
    def window(self) -> int:
        return self.states.shape[1]

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            i = int(idx)
            return Transition(tuple(int(x) for x in self.states[i]), int(self.actions[i]),
                              float(self.rewards[i]), tuple(int(x) for x in self.next_states[i]),
                              bool(self.terminal[i]), str(self.events[i]))
        return TransitionSet(self.states[idx], self.actions[idx], self.rewards[idx],
                             self.next_states[idx], self.terminal[idx], self.events[idx],
                             self.actors[idx], self.timestamps[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def positive(self) -> "TransitionSet":
        return self[self.rewards > 0]

    @classmethod
    def concat(cls, sets: Sequence["TransitionSet"]) -> "TransitionSet":
        return cls(*(np.concatenate([getattr(s, a) for s in sets]) for a in
                     ("states", "actions", "rewards", "next_states", "terminal", "events",
                      "actors", "timestamps")))

    def batch(self, idx):
        """Torch tensors for the rows in ``idx``."""
        return (torch.from_numpy(self.states[idx]), torch.from_numpy(self.actions[idx]),
                torch.from_numpy(self.rewards[idx]), torch.from_numpy(self.next_states[idx]),
                torch.from_numpy(self.terminal[idx]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(len(self)):
                fh.write("|".join([
                    ",".join(str(x) for x in self.states[i]),
                    str(int(self.actions[i])),
                    repr(float(self.rewards[i])),
                    "1" if self.terminal[i] else "0",
                    str(self.events[i]),
                    str(self.actors[i]),
                    str(int(self.timestamps[i])),
                ]) + "\n")

    @classmethod
    def load(cls, path) -> "TransitionSet":
        states, actions, rewards, terminal, events, actors, stamps = [], [], [], [], [], [], []
        with open(path) as fh:
            for n, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = [p.strip() for p in line.split("|")]
                try:
                    if len(parts) != 7:
                        raise ValueError(f"expected 7 fields, got {len(parts)}")
                    s = [int(x) for x in parts[0].split(",")]
                    if states and len(s) != len(states[0]):
                        raise ValueError("inconsistent window length")
                    states.append(s)
                    actions.append(int(parts[1]))
                    rewards.append(float(parts[2]))
                    terminal.append(parts[3] == "1")
                    events.append(parts[4])
                    actors.append(parts[5])
                    stamps.append(int(parts[6]))
                except ValueError as exc:
                    raise DataError(str(exc), location=f"{path}:{n}") from exc
        if not states:
            return cls(np.zeros((0, 1)), [], [], np.zeros((0, 1)), [])
        states = np.asarray(states, dtype=np.int64)
        rewards = np.asarray(rewards)
        actions = np.asarray(actions)
        next_states = np.where((rewards > 0)[:, None],
                               np.concatenate([states[:, 1:], actions[:, None]], axis=1), states)
        return cls(states, actions, rewards, next_states, terminal, events, actors, stamps)


# --------------------------------------------------------------------------- ingestion

def parse_log(path, schema: str = "auto") -> list[InteractionRecord]:
    """Read a ratings or sessions CSV, preserving file order.

    All malformed rows are collected and reported together with their line
    numbers.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file", location=str(path)) from None
        if schema == "auto":
            schema = {tuple(RATINGS_HEADER): "ratings", tuple(SESSIONS_HEADER): "sessions"}.get(tuple(header), "")
            if not schema:
                raise DataError(f"unknown schema with header {header}", location=f"{path}:1")
        expected = {"ratings": RATINGS_HEADER, "sessions": SESSIONS_HEADER}.get(schema)
        if expected is None:
            raise DataError(f"unknown schema {schema!r}", location=str(path))
        if header != expected:
            raise DataError(f"header {header} does not match {schema} schema {expected}", location=f"{path}:1")

        records, errors = [], []
        for n, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                records.append(_parse_row(row, schema, n))
            except ValueError as exc:
                errors.append(f"{path}:{n}: {exc}")
    if errors:
        shown = "; ".join(errors[:10])
        more = f" (+{len(errors) - 10} more)" if len(errors) > 10 else ""
        raise DataError(f"{len(errors)} malformed row(s): {shown}{more}", location=str(path))
    return records


def _parse_row(row, schema, line):
    if len(row) != 4:
        raise ValueError(f"expected 4 fields, got {len(row)}")
    row = [c.strip() for c in row]
    if schema == "ratings":
        actor, item, rating, ts = row
        feedback = float(rating)
        if not math.isfinite(feedback):
            raise ValueError(f"non-finite rating {rating!r}")
    else:
        actor, ts, item, event = row
        feedback = event.lower()
        if feedback not in EVENTS:
            raise ValueError(f"event must be one of {EVENTS}, got {event!r}")
    if not actor or not item:
        raise ValueError("empty actor or item id")
    stamp = int(ts)
    if stamp < 0:
        raise ValueError(f"negative timestamp {stamp}")
    return InteractionRecord(actor, item, feedback, stamp, line)


def write_log(path, records: Iterable[InteractionRecord], schema: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if schema == "ratings":
            w.writerow(RATINGS_HEADER)
            for r in records:
                w.writerow([r.actor, r.item, f"{float(r.feedback):g}", r.timestamp])
        elif schema == "sessions":
            w.writerow(SESSIONS_HEADER)
            for r in records:
                w.writerow([r.actor, r.timestamp, r.item, r.feedback])
        else:
            raise ConfigError(f"unknown schema {schema!r}", field="schema")


def dedupe_simultaneous(records: Iterable[InteractionRecord]) -> list[InteractionRecord]:
    """Keep the first record (file order) for each (actor, timestamp)."""
    seen = set()
    out = []
    for r in records:
        key = (r.actor, r.timestamp)
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def map_reward(record: InteractionRecord, spec: RewardSpec) -> float:
    if spec.scheme == "rating":
        if isinstance(record.feedback, str):
            raise DataError(f"rating expected, got event {record.feedback!r}", location=f"line {record.line}")
        return 1.0 if record.feedback >= spec.threshold else 0.0
    if record.feedback not in spec.event_values or record.feedback not in EVENTS:
        raise DataError(f"event {record.feedback!r} outside {EVENTS}", location=f"line {record.line}")
    return float(spec.event_values[record.feedback])


def chronological_split(records: Sequence[InteractionRecord], spec: SplitSpec):
    """Stable sort by timestamp then cut by cumulative fraction."""
    if not records:
        raise DataError("cannot split an empty record list")
    ordered = sorted(records, key=lambda r: r.timestamp)
    n = len(ordered)
    n_train = int(round(n * spec.train))
    n_valid = int(round(n * (spec.train + spec.valid))) - n_train
    return ordered[:n_train], ordered[n_train:n_train + n_valid], ordered[n_train + n_valid:]


def build_transitions(records: Sequence[InteractionRecord], catalog: Catalog, window: int,
                      reward_spec: RewardSpec, emit_cold_start: bool = True,
                      return_sources: bool = False):
    """Walk each actor's stream once, emitting one transition per record.

    Output is ordered by actor id then time. With ``return_sources`` the
    index of the originating record in ``records`` is returned alongside.
    """
    if window < 1:
        raise ConfigError("window must be >= 1", field="window")
    by_actor = defaultdict(list)
    for i, r in enumerate(records):
        by_actor[r.actor].append(i)

    states, actions, rewards, nexts, terms, events, actors, stamps, sources = ([] for _ in range(9))
    for actor in sorted(by_actor, key=natural_key):
        idx = sorted(by_actor[actor], key=lambda i: records[i].timestamp)
        win = [PAD] * window
        for pos, i in enumerate(idx):
            r = records[i]
            a = catalog.to_internal(r.item)
            rew = map_reward(r, reward_spec)
            nxt = win[1:] + [a] if rew > 0 else list(win)
            if emit_cold_start or pos > 0:
                states.append(win)
                actions.append(a)
                rewards.append(rew)
                nexts.append(nxt)
                terms.append(pos == len(idx) - 1)
                events.append(r.feedback if isinstance(r.feedback, str) else "")
                actors.append(actor)
                stamps.append(r.timestamp)
                sources.append(i)
            win = nxt
    if not states:
        ts = TransitionSet(np.zeros((0, window)), [], [], np.zeros((0, window)), [])
    else:
        ts = TransitionSet(states, actions, rewards, nexts, terms, events, actors, stamps)
    return (ts, np.asarray(sources, dtype=np.int64)) if return_sources else ts


def unrated_set(history_items: Iterable[int], n_items: int) -> set:
    """Catalog ids ``1..n_items`` the actor has not interacted with."""
    return set(range(1, n_items + 1)) - set(int(i) for i in history_items)


class History:
    """Per-actor interaction timeline for 'unrated up till t' queries."""

    def __init__(self, sets: Sequence[TransitionSet]):
        per = defaultdict(list)
        for s in sets:
            for actor, t, a in zip(s.actors, s.timestamps, s.actions):
                per[actor].append((int(t), int(a)))
        self._per = {}
        for actor, rows in per.items():
            rows.sort()
            self._per[actor] = (np.array([t for t, _ in rows], dtype=np.int64),
                                np.array([a for _, a in rows], dtype=np.int64))

    def seen_before(self, actor, t) -> np.ndarray:
        if actor not in self._per:
            return np.zeros(0, dtype=np.int64)
        times, items = self._per[actor]
        return items[: np.searchsorted(times, t, side="left")]


@dataclass
class Dataset:
    train: TransitionSet
    valid: TransitionSet
    test: TransitionSet
    catalog: Catalog

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    @property
    def window(self) -> int:
        return self.train.window

    def history(self) -> History:
        return History([self.train, self.valid, self.test])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in SPLIT_NAMES:
            getattr(self, name).save(d / f"{name}.txt")
        self.catalog.save(d / "catalog.csv")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        missing = [n for n in (*(f"{s}.txt" for s in SPLIT_NAMES), "catalog.csv") if not (d / n).exists()]
        if missing:
            raise DataError(f"missing dataset files {missing}", location=str(d))
        sets = [TransitionSet.load(d / f"{s}.txt") for s in SPLIT_NAMES]
        return cls(*sets, Catalog.load(d / "catalog.csv"))


def ingest(records: Sequence[InteractionRecord], window: int, reward_spec: RewardSpec,
           split_spec: SplitSpec, emit_cold_start: bool = True, catalog: Catalog | None = None) -> Dataset:
    """Dedupe, split chronologically, and build per-split transitions.

    Transitions are built over the whole timeline so validation and test
    states carry the history accumulated in earlier splits. A given
    ``catalog`` must cover every item in ``records``.
    """
    records = dedupe_simultaneous(records)
    parts = chronological_split(records, split_spec)
    if catalog is None:
        catalog = Catalog.from_records(records)
    ordered = [r for p in parts for r in p]
    ts, sources = build_transitions(ordered, catalog, window, reward_spec, emit_cold_start,
                                    return_sources=True)
    bounds = np.cumsum([len(p) for p in parts])
    which = np.searchsorted(bounds, sources, side="right")
    return Dataset(ts[which == 0], ts[which == 1], ts[which == 2], catalog)
