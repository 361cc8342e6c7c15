"""Listwise samples, a synthetic generator with planted click probabilities, and JSONL I/O.

JSONL schema (one sample per line; timestamps are integer seconds since the
Unix epoch, UTC):

    user_id            int
    user               list[int]               user feature ids, one per user field
    behaviors          {field: list[int]}      |B| ids per behavior field, padded prefix uses id 0
    times              list[int]               |B| behavior timestamps, padding = 0
    candidates         {field: list[int]}      |C| ids per candidate field
    candidate_numeric  list[list[float]]       |C| rows of numeric side features
    exposure_time      int                     when the candidates were shown
    labels             list[int]               |C| click labels in {0, 1}
    planted_p          list[float] | null      true click probability (synthetic data only)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from .chunking import padding_length
from .temporal import SECONDS_PER_DAY, SECONDS_PER_HOUR, is_weekend


class DataError(ValueError):
    """Malformed dataset file or sample."""


@dataclass
class ListwiseSample:
    user_id: int
    user: list[int]
    behaviors: dict[str, list[int]]
    times: list[int]
    candidates: dict[str, list[int]]
    candidate_numeric: list[list[float]]
    exposure_time: int
    labels: list[int]
    planted_p: list[float] | None = None

    @property
    def num_behaviors(self) -> int:
        return len(self.times)

    @property
    def num_candidates(self) -> int:
        return len(self.labels)

    def validate(self):
        if self.num_candidates < 1:
            raise DataError("a sample needs at least one candidate")
        if any(y not in (0, 1) for y in self.labels):
            raise DataError("labels must be 0 or 1")
        for name, ids in self.behaviors.items():
            if len(ids) != self.num_behaviors:
                raise DataError(f"behavior field {name!r} has {len(ids)} ids, expected {self.num_behaviors}")
        for name, ids in self.candidates.items():
            if len(ids) != self.num_candidates:
                raise DataError(f"candidate field {name!r} has {len(ids)} ids, expected {self.num_candidates}")
        if len(self.candidate_numeric) != self.num_candidates:
            raise DataError("candidate_numeric needs one row per candidate")
        if self.planted_p is not None and len(self.planted_p) != self.num_candidates:
            raise DataError("planted_p needs one value per candidate")
        try:
            padding_length(self.times)
        except ValueError as exc:
            raise DataError(str(exc)) from exc

    def single_candidate(self, j: int) -> ListwiseSample:
        """Copy of this sample keeping only candidate ``j``."""
        return ListwiseSample(
            user_id=self.user_id,
            user=list(self.user),
            behaviors={k: list(v) for k, v in self.behaviors.items()},
            times=list(self.times),
            candidates={k: [v[j]] for k, v in self.candidates.items()},
            candidate_numeric=[list(self.candidate_numeric[j])],
            exposure_time=self.exposure_time,
            labels=[self.labels[j]],
            planted_p=None if self.planted_p is None else [self.planted_p[j]],
        )


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------


def sample_to_json(s: ListwiseSample) -> str:
    return json.dumps(asdict(s), separators=(",", ":"))


def sample_from_dict(obj: dict) -> ListwiseSample:
    names = {f.name for f in fields(ListwiseSample)}
    missing = names - set(obj) - {"planted_p"}
    if missing:
        raise DataError(f"missing fields: {sorted(missing)}")
    try:
        s = ListwiseSample(
            user_id=int(obj["user_id"]),
            user=[int(u) for u in obj["user"]],
            behaviors={str(k): [int(x) for x in v] for k, v in obj["behaviors"].items()},
            times=[int(t) for t in obj["times"]],
            candidates={str(k): [int(x) for x in v] for k, v in obj["candidates"].items()},
            candidate_numeric=[[float(x) for x in row] for row in obj["candidate_numeric"]],
            exposure_time=int(obj["exposure_time"]),
            labels=[int(y) for y in obj["labels"]],
            planted_p=None if obj.get("planted_p") is None else [float(p) for p in obj["planted_p"]],
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise DataError(f"bad field value: {exc}") from exc
    s.validate()
    return s


def write_jsonl(samples: Iterable[ListwiseSample], path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(sample_to_json(s))
            f.write("\n")
            count += 1
    return count


def read_jsonl(path) -> list[ListwiseSample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_dict(json.loads(line)))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------


@dataclass
class GeneratorSpec:
    """Knobs of the synthetic world.

    Every user lives through sessions; each session has one interest and
    interests drift between sessions.  Gaps between sessions are log-normal
    (hours to days), gaps inside a session exponential (seconds to minutes).
    Exposures happen ``exposure_gap`` seconds after a session ends and show
    ``num_candidates`` items.  The planted click logit of a candidate is

        a * [candidate interest == interest of the latest session]
        + b * cos(2 pi (exposure hour - preferred hour of the interest) / 24)
        + c * weekend preference of the interest * (+1 weekend, -1 weekday)
        + offset

    With ``label_mode="threshold"`` the label is [p >= 0.5]; with
    ``"bernoulli"`` it is drawn from p.  Either way it is then flipped with
    probability ``label_noise``.
    """

    num_users: int = 2000
    num_interests: int = 8
    items_per_interest: int = 40
    sessions_per_user: tuple[int, int] = (12, 24)
    session_length: tuple[int, int] = (2, 9)
    inter_session_gap_median: float = 10 * SECONDS_PER_HOUR
    inter_session_gap_sigma: float = 1.0
    intra_session_gap_mean: float = 90.0
    interest_stay_prob: float = 0.25
    seq_len: int = 64
    num_candidates: int = 4
    exposures_per_user: int = 12
    recent_candidate_prob: float = 0.5
    a: float = 3.0
    b: float = 1.5
    c: float = 1.0
    offset: float = -1.5
    label_noise: float = 0.05
    label_mode: str = "threshold"
    exposure_gap: int = SECONDS_PER_HOUR
    num_user_buckets: int = 16
    num_user_segments: int = 4
    start_time: int = 1_700_000_000
    start_spread_days: float = 30.0
    test_fraction: float = 0.2
    seed: int = 0

    behavior_fields = ("item", "category")
    candidate_fields = ("item", "category", "hour", "weekend")
    user_fields = ("user_bucket", "user_segment")

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ValueError(f"invalid generator spec: {msg}")

        need(self.num_users >= 1, "num_users must be >= 1")
        need(self.num_interests >= 1 and self.items_per_interest >= 1, "need at least one interest and item")
        lo, hi = self.sessions_per_user
        need(1 <= lo <= hi, "sessions_per_user must be an increasing pair >= 1")
        lo, hi = self.session_length
        need(1 <= lo <= hi, "session_length must be an increasing pair >= 1")
        need(self.inter_session_gap_median > 0 and self.inter_session_gap_sigma >= 0, "inter-session gaps must be positive")
        need(self.intra_session_gap_mean > 0, "intra-session gap mean must be positive")
        need(0.0 <= self.interest_stay_prob <= 1.0, "interest_stay_prob must be in [0, 1]")
        need(self.seq_len >= 1 and self.num_candidates >= 1, "seq_len and num_candidates must be >= 1")
        need(self.exposures_per_user >= 1, "exposures_per_user must be >= 1")
        need(0.0 <= self.recent_candidate_prob <= 1.0, "recent_candidate_prob must be in [0, 1]")
        need(0.0 <= self.label_noise <= 0.5, "label_noise must be in [0, 0.5]")
        need(self.label_mode in ("threshold", "bernoulli"), "label_mode must be 'threshold' or 'bernoulli'")
        need(self.exposure_gap >= 0, "exposure_gap must be >= 0")
        need(self.start_time > 0, "start_time must be positive (0 marks padding)")
        need(0.0 <= self.test_fraction < 1.0, "test_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, obj: dict) -> GeneratorSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown generator spec keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        spec = cls(**kw)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def vocab(self) -> dict[str, int]:
        return {
            "item": self.num_interests * self.items_per_interest + 1,
            "category": self.num_interests + 1,
            "hour": 24,
            "weekend": 2,
            "user_bucket": self.num_user_buckets,
            "user_segment": self.num_user_segments,
        }


@dataclass
class _World:
    preferred_hour: np.ndarray
    weekend_pref: np.ndarray


def _world(spec: GeneratorSpec) -> _World:
    rng = np.random.default_rng([spec.seed, 0])
    return _World(
        preferred_hour=rng.uniform(0.0, 24.0, size=spec.num_interests),
        weekend_pref=rng.choice([-1.0, 1.0], size=spec.num_interests),
    )


def planted_probability(spec: GeneratorSpec, world: _World, interest: int, recent_interest: int,
                        exposure_time: int) -> float:
    hour = (exposure_time % SECONDS_PER_DAY) / SECONDS_PER_HOUR
    hour_aff = math.cos(2.0 * math.pi * (hour - world.preferred_hour[interest]) / 24.0)
    weekend_aff = world.weekend_pref[interest] * (1.0 if is_weekend(exposure_time) else -1.0)
    logit = spec.a * float(interest == recent_interest) + spec.b * hour_aff + spec.c * weekend_aff + spec.offset
    return 1.0 / (1.0 + math.exp(-logit))


def _user_samples(spec: GeneratorSpec, world: _World, user_id: int) -> list[ListwiseSample]:
    rng = np.random.default_rng([spec.seed, 1, user_id])
    n_sessions = int(rng.integers(spec.sessions_per_user[0], spec.sessions_per_user[1] + 1))
    t = spec.start_time + int(rng.uniform(0.0, spec.start_spread_days) * SECONDS_PER_DAY)
    interest = int(rng.integers(spec.num_interests))

    items: list[int] = []
    cats: list[int] = []
    times: list[int] = []
    session_end: list[int] = []  # index one past the last behavior of each session
    session_interest: list[int] = []
    for s in range(n_sessions):
        if s > 0:
            gap = spec.inter_session_gap_median * math.exp(spec.inter_session_gap_sigma * rng.standard_normal())
            t += max(1, int(gap))
            if rng.random() >= spec.interest_stay_prob:
                interest = int(rng.integers(spec.num_interests))
        length = int(rng.integers(spec.session_length[0], spec.session_length[1] + 1))
        for i in range(length):
            if i > 0:
                t += max(1, int(rng.exponential(spec.intra_session_gap_mean)))
            items.append(interest * spec.items_per_interest + int(rng.integers(spec.items_per_interest)) + 1)
            cats.append(interest + 1)
            times.append(t)
        session_end.append(len(times))
        session_interest.append(interest)

    user = [user_id % spec.num_user_buckets, int(rng.integers(spec.num_user_segments))]
    k = min(spec.exposures_per_user, n_sessions)
    chosen = sorted(rng.choice(n_sessions, size=k, replace=False).tolist())

    out = []
    for s in chosen:
        end = session_end[s]
        start = max(0, end - spec.seq_len)
        pad = spec.seq_len - (end - start)
        exposure = times[end - 1] + spec.exposure_gap
        recent = session_interest[s]
        cand_interest = [
            recent if rng.random() < spec.recent_candidate_prob else int(rng.integers(spec.num_interests))
            for _ in range(spec.num_candidates)
        ]
        cand_items = [ci * spec.items_per_interest + int(rng.integers(spec.items_per_interest)) + 1 for ci in cand_interest]
        probs = [planted_probability(spec, world, ci, recent, exposure) for ci in cand_interest]
        if spec.label_mode == "threshold":
            labels = [int(p >= 0.5) for p in probs]
        else:
            labels = [int(rng.random() < p) for p in probs]
        labels = [1 - y if rng.random() < spec.label_noise else y for y in labels]
        hour = int((exposure % SECONDS_PER_DAY) // SECONDS_PER_HOUR)
        out.append(ListwiseSample(
            user_id=user_id,
            user=list(user),
            behaviors={"item": [0] * pad + items[start:end], "category": [0] * pad + cats[start:end]},
            times=[0] * pad + times[start:end],
            candidates={
                "item": cand_items,
                "category": [ci + 1 for ci in cand_interest],
                "hour": [hour] * spec.num_candidates,
                "weekend": [int(is_weekend(exposure))] * spec.num_candidates,
            },
            candidate_numeric=[[float(rng.standard_normal())] for _ in range(spec.num_candidates)],
            exposure_time=exposure,
            labels=labels,
            planted_p=probs,
        ))
    return out


def generate(spec: GeneratorSpec) -> list[ListwiseSample]:
    """All samples, user by user; each user's stream is seeded independently."""
    spec.validate()
    world = _world(spec)
    samples = []
    for user_id in range(spec.num_users):
        samples.extend(_user_samples(spec, world, user_id))
    return samples


def split_by_user(samples: list[ListwiseSample], test_fraction: float, seed: int = 0):
    """Deterministic train/test split that keeps each user on one side."""
    users = sorted({s.user_id for s in samples})
    rng = np.random.default_rng([seed, 2])
    n_test = int(round(len(users) * test_fraction))
    test_users = set(rng.permutation(users)[:n_test].tolist())
    train = [s for s in samples if s.user_id not in test_users]
    test = [s for s in samples if s.user_id in test_users]
    return train, test


def planted_oracle_auc(samples: list[ListwiseSample]) -> float:
    from .train import auc

    scores = [p for s in samples for p in (s.planted_p or [])]
    labels = [y for s in samples for y in s.labels]
    if len(scores) != len(labels):
        raise DataError("every sample needs planted_p for the oracle AUC")
    return auc(scores, labels)
