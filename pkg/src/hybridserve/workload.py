"""Request arrival and length generation for LS and BE service classes.

Arrivals follow (piecewise) Poisson processes by default; BE arrivals can
also replay an explicit timestamp trace. Prompt/output lengths come from
fixed, uniform, or empirical distributions. Everything is driven by an
explicit seed so a scenario regenerates bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError


class ServiceClass(str, Enum):
    LS = "LS"
    BE = "BE"


@dataclass(frozen=True)
class RequestSpec:
    """One inference request as generated by the workload module."""

    id: str
    cls: ServiceClass
    prompt_len: int
    output_len: int
    arrival_time: float

    def __post_init__(self):
        if self.prompt_len < 1 or self.output_len < 1:
            raise ConfigError(f"request {self.id}: lengths must be >= 1")
        if self.arrival_time < 0:
            raise ConfigError(f"request {self.id}: arrival_time must be >= 0")


@dataclass(frozen=True)
class LengthDist:
    """Prompt/output length distribution.

    kind: "fixed"     -> (prompt, output) constants
          "uniform"   -> integer-uniform over [prompt_min, prompt_max] x [output_min, output_max]
          "empirical" -> uniform draw (with replacement) from `pairs`
    """

    kind: str
    prompt: int = 0
    output: int = 0
    prompt_min: int = 0
    prompt_max: int = 0
    output_min: int = 0
    output_max: int = 0
    pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "empirical"):
            raise ConfigError(f"unknown length distribution kind {self.kind!r}")
        if self.kind == "fixed" and (self.prompt < 1 or self.output < 1):
            raise ConfigError("fixed lengths must be >= 1")
        if self.kind == "uniform":
            if not (1 <= self.prompt_min <= self.prompt_max):
                raise ConfigError("uniform prompt bounds invalid")
            if not (1 <= self.output_min <= self.output_max):
                raise ConfigError("uniform output bounds invalid")
        if self.kind == "empirical":
            if not self.pairs:
                raise ConfigError("empirical length distribution needs a nonempty pair list")
            for p, o in self.pairs:
                if p < 1 or o < 1:
                    raise ConfigError("empirical lengths must be >= 1")


@dataclass(frozen=True)
class WorkloadConfig:
    """Workload section of a scenario.

    Either `ls_rate` or `ls_rate_schedule` describes the LS stream; the BE
    stream is a mean-rate Poisson process (`be_rate`) or an explicit
    timestamp trace (`be_trace`).
    """

    ls_rate: float = 0.0
    ls_rate_schedule: tuple[tuple[float, float], ...] = ()
    be_rate: float = 0.0
    be_trace: tuple[float, ...] = ()
    ls_lengths: Optional[LengthDist] = None
    be_lengths: Optional[LengthDist] = None
    seed: int = 0

    def __post_init__(self):
        if self.ls_rate < 0 or self.be_rate < 0:
            raise ConfigError("rates must be >= 0")
        if self.ls_rate_schedule:
            times = [t for t, _ in self.ls_rate_schedule]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ConfigError("schedule change-points must be strictly increasing")
            if any(r <= 0 for _, r in self.ls_rate_schedule):
                raise ConfigError("schedule rates must be > 0")


def _poisson_segment(rng: np.random.Generator, rate: float, start: float, end: float) -> list[float]:
    """Exponential inter-arrival stream on [start, end); draws one at a time
    so the consumption pattern is identical whether a rate segment is used
    alone or as part of a schedule."""
    out: list[float] = []
    t = start
    scale = 1.0 / rate
    while True:
        t += rng.exponential(scale)
        if t >= end:
            return out
        out.append(t)


def gen_poisson_arrivals(rate: float, horizon: float, seed: int) -> list[float]:
    """Sorted arrival timestamps of a Poisson process with the given rate.

    Inter-arrival times are i.i.d. exponential(rate); the stream is
    deterministic for a fixed seed.
    """
    if rate <= 0 or horizon <= 0:
        raise ConfigError("rate and horizon must be > 0")
    rng = np.random.default_rng(seed)
    return _poisson_segment(rng, rate, 0.0, horizon)


def gen_dynamic_rate_arrivals(
    schedule: Sequence[tuple[float, float]], horizon: float, seed: int
) -> list[float]:
    """Piecewise-Poisson stream: each (time, rate) change-point switches the
    arrival rate from that time onward. A single segment (0, r) produces the
    same stream as gen_poisson_arrivals(r, horizon, seed)."""
    if not schedule:
        raise ConfigError("schedule must be nonempty")
    times = [t for t, _ in schedule]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("schedule change-points must be strictly increasing (overlap)")
    if any(r <= 0 for _, r in schedule):
        raise ConfigError("schedule rates must be > 0")
    if horizon <= 0:
        raise ConfigError("horizon must be > 0")

    rng = np.random.default_rng(seed)
    out: list[float] = []
    for i, (start, rate) in enumerate(schedule):
        if start >= horizon:
            break
        end = min(horizon, schedule[i + 1][0]) if i + 1 < len(schedule) else horizon
        out.extend(_poisson_segment(rng, rate, start, end))
    return out


def make_random_rate_schedule(
    interval: float,
    rate_min: float,
    rate_max: float,
    horizon: float,
    seed: int,
) -> list[tuple[float, float]]:
    """Bursty-load schedule: every `interval` seconds the rate is redrawn
    uniformly from [rate_min, rate_max]."""
    if interval <= 0 or rate_min <= 0 or rate_max < rate_min:
        raise ConfigError("invalid bursty schedule parameters")
    rng = np.random.default_rng(seed)
    n = int(math.ceil(horizon / interval))
    return [(i * interval, float(rng.uniform(rate_min, rate_max))) for i in range(n)]


def sample_lengths(dist: LengthDist, count: int, seed: int) -> list[tuple[int, int]]:
    """Draw `count` (prompt_len, output_len) pairs; deterministic per seed."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    rng = np.random.default_rng(seed)
    if dist.kind == "fixed":
        return [(dist.prompt, dist.output)] * count
    if dist.kind == "uniform":
        prompts = rng.integers(dist.prompt_min, dist.prompt_max + 1, size=count)
        outputs = rng.integers(dist.output_min, dist.output_max + 1, size=count)
        return [(int(p), int(o)) for p, o in zip(prompts, outputs)]
    idx = rng.integers(0, len(dist.pairs), size=count)
    return [dist.pairs[int(i)] for i in idx]


def _bounded_skewed(n: int, mean: int, cap: int, rng: np.random.Generator) -> list[int]:
    """Right-skewed integer lengths in [1, cap] whose list mean equals `mean`
    exactly (up to the rounding of mean * n)."""
    vals = rng.lognormal(mean=0.0, sigma=0.6, size=n)
    vals = np.clip(vals * (mean / vals.mean()), 1, cap)
    vals = np.clip(vals * (mean / vals.mean()), 1, cap)
    out = [int(round(v)) for v in vals]
    deficit = int(round(mean * n)) - sum(out)
    step = 1 if deficit > 0 else -1
    i = 0
    while deficit != 0:
        nv = out[i] + step
        if 1 <= nv <= cap:
            out[i] = nv
            deficit -= step
        i = (i + 1) % n
    return out


def _skewed_pairs(
    n: int, prompt_mean: int, output_mean: int, prompt_cap: int, seed: int
) -> tuple[tuple[int, int], ...]:
    """Synthetic skewed length list whose means match the target exactly."""
    rng = np.random.default_rng(seed)
    prompts = _bounded_skewed(n, prompt_mean, prompt_cap, rng)
    outputs = _bounded_skewed(n, output_mean, max(2 * output_mean, 64), rng)
    return tuple(zip(prompts, outputs))


def longbench_like(n: int = 512, seed: int = 1) -> LengthDist:
    """Long-document BE length list: mean input/output 8952/136, max ~12K."""
    return LengthDist(kind="empirical", pairs=_skewed_pairs(n, 8952, 136, 12000, seed))


def dailymails_like(n: int = 512, seed: int = 2) -> LengthDist:
    """Summarization-style BE length list: mean input/output 1964/397."""
    return LengthDist(kind="empirical", pairs=_skewed_pairs(n, 1964, 397, 8000, seed))


def sharegpt_like(n: int = 512, seed: int = 3) -> LengthDist:
    """Chat-style LS length list. No canonical output-length distribution is
    published for this load; the spread here is a configurable default."""
    return LengthDist(kind="empirical", pairs=_skewed_pairs(n, 512, 160, 4000, seed))


NAMED_LENGTH_SOURCES = {
    "longbench": longbench_like,
    "dailymails": dailymails_like,
    "sharegpt": sharegpt_like,
}


def build_requests(config: WorkloadConfig, horizon: float) -> list[RequestSpec]:
    """Generate the merged LS+BE request stream for a scenario.

    Per-stream order is arrival order; the merged stream is sorted by
    (arrival_time, class, per-stream index), so merging preserves both
    per-stream ordering and global time ordering.
    """
    ls_times: list[float] = []
    if config.ls_rate_schedule:
        ls_times = gen_dynamic_rate_arrivals(config.ls_rate_schedule, horizon, config.seed)
    elif config.ls_rate > 0:
        ls_times = gen_poisson_arrivals(config.ls_rate, horizon, config.seed)

    be_times: list[float] = []
    if config.be_trace:
        be_times = sorted(t for t in config.be_trace if 0 <= t < horizon)
    elif config.be_rate > 0:
        be_times = gen_poisson_arrivals(config.be_rate, horizon, config.seed + 1)

    if ls_times and config.ls_lengths is None:
        raise ConfigError("LS arrivals configured without an LS length distribution")
    if be_times and config.be_lengths is None:
        raise ConfigError("BE arrivals configured without a BE length distribution")

    ls_lens = sample_lengths(config.ls_lengths, len(ls_times), config.seed + 2) if ls_times else []
    be_lens = sample_lengths(config.be_lengths, len(be_times), config.seed + 3) if be_times else []

    requests = [
        RequestSpec(f"LS-{i:05d}", ServiceClass.LS, p, o, t)
        for i, (t, (p, o)) in enumerate(zip(ls_times, ls_lens))
    ] + [
        RequestSpec(f"BE-{i:05d}", ServiceClass.BE, p, o, t)
        for i, (t, (p, o)) in enumerate(zip(be_times, be_lens))
    ]
    requests.sort(key=lambda r: (r.arrival_time, r.cls.value, r.id))
    return requests
