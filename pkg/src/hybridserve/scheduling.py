"""SLO-aware scheduling operations for hybrid LS/BE serving.

All decisions reduce to one per-layer budget inequality: the predicted
compute of a layer (prefill attention + decode attention + dense) must fit
inside the per-layer share of the relevant SLO minus the collective
communication budget. LS admission tests the worst case (all pending
prefill work at once) against the TTFT share; chunk sizing, BE decode
placement and piggyback admission test the actual iteration batch against
the TPOT share.

Every operation returns its inputs and both sides of the inequality so the
engine can stream an audit log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Sequence

from .errors import ConfigError
from .latency import LatencyModelSet, predict_decode_attn, predict_dense, predict_prefill_attn
from .profiles import ClusterProfile, DeviceProfile
from .workload import ServiceClass

# Safety margin (µs) applied to every budget comparison: guards against the
# ~1e-12 relative rounding gap between fitted models and the profile costs
# the engine actually charges.
FEASIBILITY_EPS_US = 1e-6


class RequestPhase(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class SloConfig:
    """SLO targets plus the per-layer piggyback overhead reserve (µs)."""

    ttft_s: float
    tpot_s: float
    num_layers: int
    piggyback_reserve_us: float = 0.0

    def __post_init__(self):
        if self.ttft_s <= 0 or self.tpot_s <= 0:
            raise ConfigError("SLO targets must be > 0")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.piggyback_reserve_us < 0:
            raise ConfigError("piggyback reserve must be >= 0")

    @property
    def prefill_layer_budget_us(self) -> float:
        return self.ttft_s * 1e6 / self.num_layers

    @property
    def decode_layer_budget_us(self) -> float:
        return self.tpot_s * 1e6 / self.num_layers

    @property
    def reserved_decode_layer_budget_us(self) -> float:
        """Decode budget with the piggyback overhead reserve held back;
        clamped at zero when the reserve exceeds the layer share."""
        return max(0.0, self.decode_layer_budget_us - self.piggyback_reserve_us)


def default_piggyback_reserve_us(gpu_profile: DeviceProfile, cluster: ClusterProfile) -> float:
    """Reserve sized to the engine's worst-case extra charge per layer:
    queue/residual handling for a full piggyback batch plus one decode
    request's marginal attention cost (the placement check evaluates the
    candidate at its pre-admission footprint)."""
    return (
        cluster.merge_cost_per_result * cluster.max_piggyback_per_layer
        + gpu_profile.attn_decode_per_req
        + gpu_profile.attn_decode_per_unit
    )


@dataclass
class RequestView:
    """Scheduler-visible slice of a request."""

    id: str
    cls: ServiceClass
    prompt_len: int   # total prompt tokens
    done_tokens: int  # context tokens already processed
    arrival_time: float
    phase: RequestPhase = RequestPhase.PREFILL

    def __post_init__(self):
        if self.phase == RequestPhase.PREFILL and not 0 <= self.done_tokens <= self.prompt_len:
            raise ConfigError(f"{self.id}: prefill progress out of range")
        if self.phase == RequestPhase.DECODE and self.done_tokens < self.prompt_len:
            raise ConfigError(f"{self.id}: decode request with incomplete prefill")

    @property
    def remaining_prompt(self) -> int:
        return self.prompt_len - self.done_tokens


@dataclass
class SchedulerState:
    """Live request sets; load counters are recomputed from these on every
    call, never cached."""

    prefill: list[RequestView] = field(default_factory=list)
    decode: list[RequestView] = field(default_factory=list)


class Loads(NamedTuple):
    """Batch load counters.

    prefill_units: pairwise-token prefill attention load
    attn_tokens:   decode-attention context tokens (sum of context+1)
    reqs:          batched request count
    batch_tokens:  query tokens entering the dense modules
    """

    prefill_units: float
    attn_tokens: float
    reqs: int
    batch_tokens: int


def pairwise_units(done_tokens: int, count: int) -> float:
    """Prefill attention load of processing `count` tokens after
    `done_tokens` of context: sum of the attended positions
    done_tokens+1 .. done_tokens+count."""
    if count < 0 or done_tokens < 0:
        raise ConfigError("pairwise_units arguments must be >= 0")
    return count * (2 * done_tokens + count + 1) / 2.0


def compute_loads(state: SchedulerState, candidate: Optional[RequestView] = None) -> Loads:
    """Worst-case load counters over the live sets (plus an optional
    admission candidate): all remaining prefill work counted at once."""
    prefills = list(state.prefill) + ([candidate] if candidate is not None else [])
    prefill_units = sum(pairwise_units(r.done_tokens, r.remaining_prompt) for r in prefills)
    attn_tokens = sum(r.done_tokens + 1 for r in state.decode) + sum(
        r.done_tokens + 1 for r in prefills
    )
    reqs = len(state.decode) + len(prefills)
    batch_tokens = sum(r.remaining_prompt for r in prefills) + len(state.decode)
    return Loads(prefill_units, attn_tokens, reqs, batch_tokens)


_CLASS_PRIORITY = {
    (ServiceClass.LS, RequestPhase.DECODE): 0,
    (ServiceClass.LS, RequestPhase.PREFILL): 1,
    (ServiceClass.BE, RequestPhase.PREFILL): 2,
    (ServiceClass.BE, RequestPhase.DECODE): 3,
}


def schedule_order(pending: Sequence[RequestView]) -> list[RequestView]:
    """Class-priority order: LS decode, LS chunk prefill, BE chunk prefill,
    BE decode; first-come-first-serve within a class, ids break ties."""
    return sorted(
        pending, key=lambda r: (_CLASS_PRIORITY[(r.cls, r.phase)], r.arrival_time, r.id)
    )


def _fits(lhs_us: float, budget_us: float) -> bool:
    return lhs_us <= budget_us - FEASIBILITY_EPS_US


def _batch_compute_us(models: LatencyModelSet, loads: Loads) -> float:
    return (
        predict_prefill_attn(models.prefill_attn, loads.prefill_units)
        + predict_decode_attn(models.decode_attn, loads.attn_tokens, loads.reqs)
        + predict_dense(models.dense, loads.batch_tokens)
    )


@dataclass(frozen=True)
class AdmitDecision:
    admitted: bool
    lhs_us: float
    rhs_us: float
    loads: Loads


def admit_ls(
    candidate: RequestView,
    state: SchedulerState,
    models: LatencyModelSet,
    slo: SloConfig,
) -> AdmitDecision:
    """Admission control for an arriving LS request: admit iff the queued
    and candidate prefill work, plus the current decode load, fits the
    per-layer TTFT share net of communication."""
    loads = compute_loads(state, candidate)
    lhs = _batch_compute_us(models, loads)
    rhs = slo.prefill_layer_budget_us - models.gamma(loads.batch_tokens)
    return AdmitDecision(admitted=_fits(lhs, rhs), lhs_us=lhs, rhs_us=rhs, loads=loads)


def chunk_prefill_budget(
    done_tokens: int,
    prompt_len: int,
    loads: Loads,
    models: LatencyModelSet,
    budget_us: float,
) -> int:
    """Largest chunk q in [0, remaining] whose addition keeps the layer
    within `budget_us`; 0 defers the request one iteration.

    Exploits monotonicity of the predicted latency in q: binary search over
    the chunk size.
    """
    if not 0 <= done_tokens < prompt_len:
        raise ConfigError("chunk budgeting requires an incomplete prefill")
    remaining = prompt_len - done_tokens

    def feasible(q: int) -> bool:
        lhs = (
            predict_prefill_attn(
                models.prefill_attn, loads.prefill_units + pairwise_units(done_tokens, q)
            )
            + predict_decode_attn(models.decode_attn, loads.attn_tokens, loads.reqs)
            + predict_dense(models.dense, loads.batch_tokens + q)
        )
        return _fits(lhs, budget_us)

    if not feasible(1):
        return 0
    lo, hi = 1, remaining
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if feasible(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


class BePlacement(str, Enum):
    ON_GPU = "on_gpu"
    OFFLOAD_CPU = "offload_cpu"


@dataclass(frozen=True)
class BeDecodeDecision:
    placement: BePlacement
    lhs_us: float
    rhs_us: float
    kv_ok: bool


def be_decode_admit(
    context_tokens: int,
    loads: Loads,
    models: LatencyModelSet,
    slo: SloConfig,
    gpu_kv_free: int,
) -> BeDecodeDecision:
    """GPU-vs-CPU placement for one BE decoding request of the given
    context length: on GPU iff its simulated load impact fits the reserved
    decode budget and its KV fits the free GPU cache."""
    lhs = (
        predict_prefill_attn(models.prefill_attn, loads.prefill_units)
        + predict_decode_attn(models.decode_attn, loads.attn_tokens + context_tokens, loads.reqs)
        + predict_dense(models.dense, loads.batch_tokens + 1)
    )
    rhs = slo.reserved_decode_layer_budget_us - models.gamma(loads.batch_tokens + 1)
    kv_ok = context_tokens <= gpu_kv_free
    placement = BePlacement.ON_GPU if (_fits(lhs, rhs) and kv_ok) else BePlacement.OFFLOAD_CPU
    return BeDecodeDecision(placement=placement, lhs_us=lhs, rhs_us=rhs, kv_ok=kv_ok)


def max_piggyback_count(
    loads: Loads,
    models: LatencyModelSet,
    slo: SloConfig,
    cap: int,
) -> int:
    """Largest number of piggybacked results a layer can absorb on top of
    the current batch within the reserved decode budget."""

    def feasible(p: int) -> bool:
        lhs = _batch_compute_us(
            models, loads._replace(batch_tokens=loads.batch_tokens + p)
        )
        rhs = slo.reserved_decode_layer_budget_us - models.gamma(loads.batch_tokens + p)
        return _fits(lhs, rhs)

    if cap <= 0 or not feasible(1):
        return 0
    lo, hi = 1, cap
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if feasible(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def piggyback_budget(
    ready: dict[int, int],
    loads: Loads,
    models: LatencyModelSet,
    slo: SloConfig,
    max_per_layer: int,
) -> dict[int, int]:
    """Greedy layer-wise piggyback admission, lowest layer first.

    Each layer admits the largest count that keeps its widened dense call
    (plus the batch's attention terms) inside the reserved decode budget;
    admitted results are consumed FIFO from the output queue. The cap keeps
    the merge overhead within the configured reserve.
    """
    budgets: dict[int, int] = {}
    cached_max: Optional[int] = None
    for layer in sorted(ready):
        if ready[layer] < 0:
            raise ConfigError("ready counts must be >= 0")
        if ready[layer] == 0:
            budgets[layer] = 0
            continue
        if cached_max is None:
            cached_max = max_piggyback_count(loads, models, slo, max_per_layer)
        budgets[layer] = min(ready[layer], cached_max)
    return budgets


@dataclass
class BatchPlan:
    """One GPU iteration: placements per category plus per-layer piggyback
    admissions. A request appears in at most one category."""

    ls_decode: list[str] = field(default_factory=list)
    ls_prefill_chunks: list[tuple[str, int]] = field(default_factory=list)
    be_prefill_chunks: list[tuple[str, int]] = field(default_factory=list)
    be_decode_gpu: list[str] = field(default_factory=list)
    be_offload_cpu: list[str] = field(default_factory=list)
    swap_back_in: list[str] = field(default_factory=list)
    piggyback_per_layer: dict[int, int] = field(default_factory=dict)
    loads: Loads = Loads(0.0, 0.0, 0, 0)

    def placed_once(self) -> bool:
        seen: set[str] = set()
        groups = [
            self.ls_decode,
            [r for r, _ in self.ls_prefill_chunks],
            [r for r, _ in self.be_prefill_chunks],
            self.be_decode_gpu,
            self.be_offload_cpu,
        ]
        for group in groups:
            for rid in group:
                if rid in seen:
                    return False
                seen.add(rid)
        return True


def headroom_baseline_plan(
    state: SchedulerState,
    headroom_frac: float,
    gpu_kv_capacity: int,
    chunk_tokens: int = 2048,
) -> BatchPlan:
    """Memory-reservation baseline: BE usage is capped at
    (1 - headroom_frac) of the GPU cache and nothing is latency-checked.

    LS and BE prefills share a fixed per-iteration chunk allowance (no
    latency model); BE requests not yet started are admitted only while the
    cap and physical free space allow their full prompt. No CPU offload.
    """
    if not 0 < headroom_frac < 1:
        raise ConfigError("headroom_frac must be in (0, 1)")
    plan = BatchPlan()
    # whole-token allowance so boundary admissions are exact
    be_allowance = round((1.0 - headroom_frac) * gpu_kv_capacity)
    total_used = sum(r.done_tokens for r in state.decode) + sum(
        r.done_tokens for r in state.prefill
    )
    be_used = sum(
        r.done_tokens for r in state.decode if r.cls == ServiceClass.BE
    ) + sum(r.done_tokens for r in state.prefill if r.cls == ServiceClass.BE)

    for r in schedule_order(state.decode):
        (plan.ls_decode if r.cls == ServiceClass.LS else plan.be_decode_gpu).append(r.id)

    tokens_left = chunk_tokens
    for r in schedule_order(state.prefill):
        if tokens_left <= 0:
            break
        if r.cls == ServiceClass.BE and r.done_tokens == 0:
            # New BE admission: the whole prompt must respect the headroom
            # cap and fit the physically free cache.
            if be_used + r.prompt_len > be_allowance:
                continue
            if total_used + r.prompt_len > gpu_kv_capacity:
                continue
            be_used += r.prompt_len
            total_used += r.prompt_len
        q = min(tokens_left, r.remaining_prompt)
        tokens_left -= q
        target = plan.ls_prefill_chunks if r.cls == ServiceClass.LS else plan.be_prefill_chunks
        target.append((r.id, q))
    return plan
