"""Discrete-event simulation of the hybrid serving control plane.

One GPU stream executes batch plans layer by layer; CPU hosts service
attention work items from per-host input queues and return results through
a single FIFO output queue; PCIe/network transfers and KV swaps run as
asynchronous events that never block the GPU timeline. All compute time is
charged from the device profiles (ground truth); the scheduler consults the
fitted latency models.

Offloaded BE requests advance as chains: a work item carries one layer's
q/k/v to a CPU host, the attention result returns through the output queue,
and a later iteration piggybacks it at the same layer's post-attention
dense call, which also performs the next layer's QKV and emits the next
work item. A token therefore costs d piggyback merges; context and KV stay
on the assigned CPU host until the scheduler swaps the request back.

The engine is logically single-threaded over a deterministic event loop;
identical (scenario, seed) inputs produce identical event logs.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import IntegrityFault, ScenarioError
from .latency import LatencyModelSet, fit_model_set
from .metrics import RequestRecord, SimReport, build_report
from .profiles import Phase, probe_attention, probe_dense
from .scenario import EngineOptions, Scenario
from .scheduling import (
    BatchPlan,
    BePlacement,
    Loads,
    RequestPhase,
    RequestView,
    SchedulerState,
    SloConfig,
    admit_ls,
    be_decode_admit,
    chunk_prefill_budget,
    headroom_baseline_plan,
    max_piggyback_count,
    pairwise_units,
    piggyback_budget,
)
from .workload import RequestSpec, ServiceClass, build_requests

US = 1e-6  # microseconds -> seconds

MODULE_SEQUENCE = ("QKV", "Attn", "Proj", "ResidualAdd", "MLP", "ResidualAdd")

_CALIBRATION_CORES = 24

_EV_ARRIVAL = "arrival"
_EV_LAYER_DONE = "gpu_layer_done"
_EV_WORKITEM = "workitem_arrival"
_EV_SERVICE_DONE = "cpu_service_done"
_EV_RESULT = "result_arrival"
_EV_SWAP_DONE = "swap_done"


class SimRequest:
    """Runtime state of one request."""

    __slots__ = (
        "id", "cls", "prompt_len", "output_len", "arrival", "admitted",
        "phase", "prefill_done", "tokens_out", "token_times", "first_token_time",
        "completion", "kv_place", "kv_held", "gpu_reserved", "swap_reserved",
        "chain_state", "chain_layer", "swap_state", "swap_dest", "rebuild_tokens",
        "placement_log",
    )

    def __init__(self, spec: RequestSpec):
        self.id = spec.id
        self.cls = spec.cls
        self.prompt_len = spec.prompt_len
        self.output_len = spec.output_len
        self.arrival = spec.arrival_time
        self.admitted = False
        self.phase = "queued"          # queued | prefill | decode | done | rejected
        self.prefill_done = 0
        self.tokens_out = 0
        self.token_times: list[float] = []
        self.first_token_time: Optional[float] = None
        self.completion: Optional[float] = None
        self.kv_place: Optional[object] = None  # "gpu" | host index
        self.kv_held = 0          # tokens stored at kv_place
        self.gpu_reserved = 0     # GPU tokens reserved for a pending swap-in
        self.swap_reserved = 0    # host tokens reserved for the offload lifetime
        self.chain_state = "none"  # none | inject | input | output
        self.chain_layer = 0
        self.swap_state = "none"   # none | out | in_pending | in_transfer | in_done
        self.swap_dest: Optional[int] = None
        self.rebuild_tokens = 0    # context to re-prefill after a preemption
        self.placement_log: list[tuple[float, str]] = []

    @property
    def ctx(self) -> int:
        """Context tokens in the KV cache (prompt plus committed decode
        tokens, excluding the token currently being generated)."""
        if self.phase == "prefill":
            return self.prefill_done
        return self.prompt_len + max(0, self.tokens_out - 1)

    @property
    def prefill_target(self) -> int:
        """Tokens the prefill must process: the prompt, plus the rebuilt
        context after a recomputation preemption."""
        return self.prompt_len + self.rebuild_tokens

    @property
    def remaining_prompt(self) -> int:
        return self.prefill_target - self.prefill_done

    def view(self) -> RequestView:
        phase = RequestPhase.PREFILL if self.phase == "prefill" else RequestPhase.DECODE
        return RequestView(
            id=self.id,
            cls=self.cls,
            prompt_len=self.prefill_target,
            done_tokens=self.prefill_done if self.phase == "prefill" else self.ctx,
            arrival_time=self.arrival,
            phase=phase,
        )


class ResidualStore:
    """Skip-connection activations for offloaded requests, keyed by
    (request, layer); every entry is written once and read exactly once."""

    def __init__(self, fault: Optional[tuple[str, int]] = None):
        self._store: dict[tuple[str, int], int] = {}
        self._fault = fault
        self.puts = 0
        self.gets = 0

    def put(self, req_id: str, layer: int, size: int = 1) -> None:
        key = (req_id, layer)
        if self._fault == key:
            self._fault = None  # drop exactly one write
            return
        if key in self._store:
            raise IntegrityFault(f"residual already stored for {key}", req_id, layer)
        self._store[key] = size
        self.puts += 1

    def get(self, req_id: str, layer: int) -> int:
        key = (req_id, layer)
        if key not in self._store:
            raise IntegrityFault(f"residual missing for {key}", req_id, layer)
        self.gets += 1
        return self._store.pop(key)

    def outstanding(self, req_id: str) -> int:
        return sum(1 for (r, _) in self._store if r == req_id)


@dataclass
class WorkItem:
    req_id: str
    layer: int
    ctx_tokens: int
    enq_seq: int
    enq_time: float


@dataclass
class ResultItem:
    req_id: str
    layer: int
    ready_time: float
    enq_seq: int


class CpuQueues:
    """Per-host input FIFOs feeding the CPU attention workers plus the
    single FIFO output queue drained by the GPU-side piggyback merges."""

    def __init__(self, n_hosts: int):
        self.input: list[deque[WorkItem]] = [deque() for _ in range(n_hosts)]
        self.output: deque[ResultItem] = deque()
        self.input_enq = 0
        self.input_deq = 0
        self.output_enq = 0
        self.output_deq = 0


class KvManager:
    """Token-granular KV accounting for the GPU cache and each CPU host."""

    def __init__(self, gpu_capacity: int, host_capacity: int, n_hosts: int):
        self.gpu_capacity = gpu_capacity
        self.gpu_used = 0
        self.host_capacity = host_capacity
        self.host_used = [0] * n_hosts

    @property
    def gpu_free(self) -> int:
        return self.gpu_capacity - self.gpu_used

    def alloc_gpu(self, tokens: int) -> bool:
        if tokens > self.gpu_free:
            return False
        self.gpu_used += tokens
        return True

    def free_gpu(self, tokens: int) -> None:
        self.gpu_used -= tokens
        if self.gpu_used < 0:
            raise IntegrityFault("GPU KV accounting went negative")

    def host_free(self, host: int) -> int:
        return self.host_capacity - self.host_used[host]

    def alloc_host(self, host: int, tokens: int) -> bool:
        if tokens > self.host_free(host):
            return False
        self.host_used[host] += tokens
        return True

    def free_host(self, host: int, tokens: int) -> None:
        self.host_used[host] -= tokens
        if self.host_used[host] < 0:
            raise IntegrityFault("CPU KV accounting went negative")


@dataclass
class CpuHost:
    id: int
    speed: float  # service-rate multiplier (cores / calibration cores)
    busy: bool = False


@dataclass
class _IterationState:
    plan: BatchPlan
    merge_cap: int
    start: float
    layer: int
    merges_total: int
    merge_layers: dict[int, int]


class Engine:
    def __init__(
        self,
        scenario: Scenario,
        models: Optional[LatencyModelSet] = None,
        inject_missing_residual: Optional[tuple[str, int]] = None,
    ):
        self.scenario = scenario
        self.opts: EngineOptions = scenario.engine
        self.slo: SloConfig = scenario.slo
        self.cluster = scenario.cluster
        self.gpu = scenario.gpu_profile
        self.cpu = scenario.cpu_profile
        self.layers = scenario.cluster.layers
        if models is None:
            models, _ = fit_model_set(self.gpu, self.cluster, seed=scenario.seed)
        self.models = models

        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self.requests: dict[str, SimRequest] = {}
        self.queues = CpuQueues(self.cluster.cpu_hosts)
        self.residuals = ResidualStore(fault=inject_missing_residual)
        self.kv = KvManager(
            self.cluster.gpu_kv_capacity, self.cluster.cpu_mem_tokens, self.cluster.cpu_hosts
        )
        host_speed = (
            self.cluster.cpu_cores_per_host / _CALIBRATION_CORES
        ) * self.opts.cpu_speed_factor
        self.hosts = [CpuHost(id=h, speed=host_speed) for h in range(self.cluster.cpu_hosts)]
        self.pending_injections: deque[ResultItem] = deque()
        self.gpu_busy = False
        self._iter: Optional[_IterationState] = None
        self.counters: dict[str, int] = {
            "arrivals": 0, "ls_admitted": 0, "ls_rejected": 0, "iterations": 0,
            "tokens_total": 0, "be_tokens_cpu": 0, "merges": 0, "injections": 0,
            "swap_out_started": 0, "swap_out_done": 0, "swap_in_started": 0,
            "swap_in_done": 0, "swap_in_cancelled": 0, "evictions": 0,
            "ls_decode_deferrals": 0, "offload_parked": 0, "preemptions": 0,
        }
        self.events: list[dict] = []
        self.audit: list[dict] = []
        self.traces: dict[str, list[tuple[int, str, str]]] = {}
        self.trace_steps: dict[str, list[str]] = {}
        self.layer_start_log: list[tuple[float, int, float]] = []
        self._noise_rng = (
            np.random.default_rng(scenario.seed + 1000) if self.opts.apply_noise else None
        )

    # --- event plumbing ---

    def _push(self, time: float, kind: str, payload) -> None:
        heapq.heappush(self._heap, (time, next(self._seq), kind, payload))

    def _log(self, kind: str, **fields) -> None:
        if self.opts.record_events:
            self.events.append({"t": self.now, "kind": kind, **fields})

    def _audit(self, op: str, request: str, lhs: float, rhs: float, outcome) -> None:
        self.audit.append(
            {
                "time": self.now,
                "op": op,
                "request": request,
                "lhs_us": lhs,
                "rhs_us": rhs,
                "outcome": outcome,
            }
        )

    # --- ground-truth charging helpers ---

    def _dense_us(self, n: int) -> float:
        return probe_dense(self.gpu, n, self._noise_rng) if n > 0 else 0.0

    def _gamma_us(self, n: int) -> float:
        return self.models.gamma(n)

    def _link_us(self, host: int, tokens: float) -> float:
        alpha, beta = self.cluster.pcie if host == 0 else self.cluster.network
        return alpha + beta * tokens if tokens > 0 else 0.0

    def _req_host(self, req: SimRequest) -> int:
        return req.kv_place if isinstance(req.kv_place, int) else 0

    # --- request lifecycle ---

    def _on_arrival(self, req: SimRequest) -> None:
        self.counters["arrivals"] += 1
        if req.prompt_len + 1 > self.cluster.gpu_kv_capacity:
            raise ScenarioError(
                f"request {req.id}: prompt of {req.prompt_len} tokens exceeds the "
                f"GPU KV capacity of {self.cluster.gpu_kv_capacity}"
            )
        if req.cls == ServiceClass.LS and self.scenario.policy in ("omniserve", "gpu_only"):
            decision = admit_ls(req.view(), self._ls_state(), self.models, self.slo)
            self._audit(
                "admit_ls", req.id, decision.lhs_us, decision.rhs_us,
                "admit" if decision.admitted else "reject",
            )
            if not decision.admitted:
                req.phase = "rejected"
                self.counters["ls_rejected"] += 1
                self._log("reject", request=req.id)
                return
            self.counters["ls_admitted"] += 1
        elif req.cls == ServiceClass.LS:
            self.counters["ls_admitted"] += 1
        req.admitted = True
        req.phase = "prefill"
        req.kv_place = "gpu"
        req.placement_log.append((self.now, "gpu"))
        self._log("admit", request=req.id)

    def _ls_state(self) -> SchedulerState:
        """Admission-control view: incomplete LS prefill and decode sets."""
        live = self._live()
        return SchedulerState(
            prefill=[r.view() for r in live if r.cls == ServiceClass.LS and r.phase == "prefill"],
            decode=[r.view() for r in live if r.cls == ServiceClass.LS and r.phase == "decode"],
        )

    def _live(self) -> list[SimRequest]:
        return [r for r in self.requests.values() if r.phase in ("prefill", "decode")]

    def _emit_token(self, req: SimRequest, time: float) -> None:
        req.tokens_out += 1
        req.token_times.append(time)
        if req.first_token_time is None:
            req.first_token_time = time
        self.counters["tokens_total"] += 1

    def _complete(self, req: SimRequest, time: float) -> None:
        req.phase = "done"
        req.completion = time
        if self.residuals.outstanding(req.id):
            raise IntegrityFault(
                f"request {req.id} completed with residuals outstanding", req.id
            )
        if req.kv_place == "gpu":
            self.kv.free_gpu(req.kv_held)
        elif isinstance(req.kv_place, int):
            self.kv.free_host(req.kv_place, req.swap_reserved)
        if req.gpu_reserved:
            self.kv.free_gpu(req.gpu_reserved)
        req.kv_held = req.gpu_reserved = req.swap_reserved = 0
        req.swap_state = "none"
        self._log("complete", request=req.id, tokens=req.tokens_out)

    # --- offload / swap machinery ---

    def _distribute_offload(self, req: SimRequest) -> Optional[int]:
        """Host assignment: the local host while its memory suffices, then
        the least-loaded remote host (ties: lowest id). The reservation
        covers the current context plus all remaining output tokens so a
        chain never overflows its host mid-flight."""
        need = req.kv_held + (req.output_len - req.tokens_out) + 1
        if self.kv.host_free(0) >= need:
            host = 0
        else:
            candidates = [
                h for h in range(1, self.cluster.cpu_hosts) if self.kv.host_free(h) >= need
            ]
            if not candidates:
                return None
            host = min(candidates, key=lambda h: (self.kv.host_used[h], h))
        self.kv.alloc_host(host, need)
        req.swap_reserved = need
        return host

    def _start_swap_out(self, req: SimRequest) -> bool:
        """Non-blocking KV swap to a CPU host; the GPU timeline is
        unaffected and the KV counts at the source until the transfer
        completes."""
        host = self._distribute_offload(req)
        if host is None:
            self.counters["offload_parked"] += 1
            return False
        req.swap_state = "out"
        req.swap_dest = host
        duration = self._link_us(host, req.kv_held) * US
        self.counters["swap_out_started"] += 1
        self._log("swap_out_start", request=req.id, host=host, tokens=req.kv_held)
        self._push(self.now + duration, _EV_SWAP_DONE, (req.id, "out"))
        return True

    def _finish_swap_out(self, req: SimRequest) -> None:
        host = req.swap_dest
        req.swap_dest = None
        self.kv.free_gpu(req.kv_held)
        req.kv_place = host
        req.swap_state = "none"
        req.placement_log.append((self.now, f"cpu{host}"))
        self.counters["swap_out_done"] += 1
        self._log("swap_out_done", request=req.id, host=host)
        self._inject(req)

    def _inject(self, req: SimRequest) -> None:
        """Queue a fresh-token entry for an offloaded request."""
        self.pending_injections.append(
            ResultItem(req.id, layer=1, ready_time=self.now, enq_seq=next(self._seq))
        )
        req.chain_state = "inject"
        req.chain_layer = 1

    def _start_swap_in(self, req: SimRequest, start_time: float) -> None:
        """One-shot KV transfer back to the GPU, issued only once the last
        token's k/v exist for every layer (token boundary, or the in-flight
        token's final-layer QKV leaving the GPU)."""
        req.swap_state = "in_transfer"
        tokens = req.kv_held + 1
        duration = self._link_us(self._req_host(req), tokens) * US
        self.counters["swap_in_started"] += 1
        self._log("swap_in_start", request=req.id, host=self._req_host(req),
                  tokens=tokens, start=start_time)
        self._push(start_time + duration, _EV_SWAP_DONE, (req.id, "in"))

    def _finish_swap_in(self, req: SimRequest) -> None:
        if req.phase == "done":
            return
        self.kv.free_host(self._req_host(req), req.swap_reserved)
        req.swap_reserved = 0
        req.swap_state = "in_done"
        self.counters["swap_in_done"] += 1
        self._log("swap_in_done", request=req.id)
        self._maybe_resume_on_gpu(req)

    def _maybe_resume_on_gpu(self, req: SimRequest) -> None:
        """The request becomes a GPU-resident decode once the transfer is
        done and its chain is idle (token boundary)."""
        if req.swap_state == "in_done" and req.chain_state == "none" and req.phase == "decode":
            req.kv_place = "gpu"
            req.swap_state = "none"
            req.placement_log.append((self.now, "gpu"))
            actual = req.ctx
            if actual < req.gpu_reserved:
                self.kv.free_gpu(req.gpu_reserved - actual)
            req.kv_held = actual
            req.gpu_reserved = 0

    def _cancel_swap_in(self, req: SimRequest) -> None:
        req.swap_state = "none"
        if req.gpu_reserved:
            self.kv.free_gpu(req.gpu_reserved)
            req.gpu_reserved = 0
        self.counters["swap_in_cancelled"] += 1
        self._log("swap_in_cancelled", request=req.id)

    def _preempt_recompute(self, req: SimRequest) -> None:
        """GPU-only preemption: drop the victim's cache; it re-prefills its
        prompt plus generated context before decoding again."""
        self.kv.free_gpu(req.kv_held)
        req.kv_held = 0
        req.phase = "prefill"
        req.rebuild_tokens = max(0, req.tokens_out - 1)
        req.prefill_done = 0
        self.counters["preemptions"] = self.counters.get("preemptions", 0) + 1
        self._log("preempt", request=req.id)

    # --- CPU attention service ---

    def _enqueue_workitem(self, req: SimRequest, layer: int, time: float) -> None:
        item = WorkItem(req.id, layer, req.ctx, next(self._seq), time)
        req.chain_state = "input"
        req.chain_layer = layer
        self._push(time, _EV_WORKITEM, item)
        # Delayed swap-in trigger: the final layer's q/k/v leaving the GPU
        # means the last token's kv now exists for all layers.
        if layer == self.layers and req.swap_state == "in_pending":
            self._start_swap_in(req, time)

    def _on_workitem(self, item: WorkItem) -> None:
        host_id = self._req_host(self.requests[item.req_id])
        self.queues.input[host_id].append(item)
        self.queues.input_enq += 1
        self._log("workitem_enq", request=item.req_id, layer=item.layer, host=host_id)
        self._maybe_start_host(host_id)

    def _maybe_start_host(self, host_id: int) -> None:
        host = self.hosts[host_id]
        queue = self.queues.input[host_id]
        if host.busy or not queue:
            return
        items = list(queue)
        queue.clear()
        self.queues.input_deq += len(items)
        host.busy = True
        c_load = sum(it.ctx_tokens + 1 for it in items)
        duration_us = (
            probe_attention(self.cpu, Phase.DECODE, c_load, len(items), self._noise_rng)
            / host.speed
        )
        self._log("cpu_service_start", host=host_id, items=len(items))
        self._push(self.now + duration_us * US, _EV_SERVICE_DONE, (host_id, items))

    def _on_service_done(self, host_id: int, items: list[WorkItem]) -> None:
        self.hosts[host_id].busy = False
        for item in items:
            if self.opts.record_traces:
                self.traces.setdefault(item.req_id, []).append((item.layer, "Attn", "CPU"))
            ready = self.now + self._link_us(host_id, self.cluster.result_payload_tokens) * US
            self._push(ready, _EV_RESULT, ResultItem(item.req_id, item.layer, ready, item.enq_seq))
        self._log("cpu_service_done", host=host_id, items=len(items))
        self._maybe_start_host(host_id)

    def _on_result(self, item: ResultItem) -> None:
        self.queues.output.append(item)
        self.queues.output_enq += 1
        self.requests[item.req_id].chain_state = "output"
        self._log("result_enq", request=item.req_id, layer=item.layer)

    # --- planning ---

    def _ordered(self, reqs: list[SimRequest]) -> list[SimRequest]:
        return sorted(reqs, key=lambda r: (r.arrival, r.id))

    def _runnable(self) -> bool:
        if self.queues.output or self.pending_injections:
            return True
        for r in self._live():
            if r.phase == "prefill":
                return True
            if r.phase == "decode" and r.kv_place == "gpu" and r.swap_state == "none":
                return True
        return False

    def _plan(self) -> BatchPlan:
        if self.scenario.policy == "headroom":
            return self._plan_headroom()
        return self._plan_budgeted()

    def _be_slot_exists(self, req: SimRequest, ls_protect: int, offload_allowed: bool) -> bool:
        """Admission gate for starting a BE prefill: the GPU must have
        workspace for the whole prompt now, and some device must be able to
        hold the request for its lifetime; otherwise a partial prefill
        would just park on the GPU and squeeze the LS cache."""
        if self.kv.gpu_free - ls_protect < req.prompt_len + 1:
            return False
        lifetime = req.prompt_len + req.output_len + 1
        if self.kv.gpu_free - ls_protect >= lifetime:
            return True
        if offload_allowed:
            return any(
                self.kv.host_free(h) >= lifetime for h in range(self.cluster.cpu_hosts)
            )
        return False

    def _plan_budgeted(self) -> BatchPlan:
        """SLO-budgeted iteration planning (omniserve / gpu_only /
        no_admission_control)."""
        plan = BatchPlan()
        offload_allowed = self.scenario.policy in ("omniserve", "no_admission_control")
        live = self._live()
        ls_decode = self._ordered(
            [r for r in live if r.cls == ServiceClass.LS and r.phase == "decode"
             and r.kv_place == "gpu"]
        )
        ls_prefill = self._ordered(
            [r for r in live if r.cls == ServiceClass.LS and r.phase == "prefill"]
        )
        be_prefill = self._ordered(
            [r for r in live if r.cls == ServiceClass.BE and r.phase == "prefill"]
        )
        be_resident = self._ordered(
            [r for r in live if r.cls == ServiceClass.BE and r.phase == "decode"
             and r.kv_place == "gpu" and r.swap_state == "none"]
        )
        be_offloaded = self._ordered(
            [r for r in live if r.cls == ServiceClass.BE and r.phase == "decode"
             and isinstance(r.kv_place, int)]
        )

        prefill_units = 0.0
        attn_tokens = 0.0
        reqs = 0
        batch_tokens = 0
        # BE allocations leave this much cache free so LS decode growth and
        # the next LS chunks are never starved by the BE backlog.
        ls_protect = len(ls_decode) + 256
        # GPU memory is "available" for BE decoding only beyond the cache
        # the live LS requests will still grow into (their remaining output
        # tokens); BE placed inside that envelope would just be evicted.
        ls_reserve = ls_protect + sum(
            r.output_len - r.tokens_out for r in ls_decode
        )

        # LS decodes always run; evict BE residents if their next token has
        # no cache room, defer (and flag) only as a last resort. Pressure
        # from pending LS prefill also displaces BE (swap-out under the
        # hybrid policies, recomputation preemption under gpu_only).
        ls_kv_pressure = len(ls_decode) + min(
            sum(r.remaining_prompt for r in ls_prefill), 4096
        )
        if ls_kv_pressure > self.kv.gpu_free:
            expected_free = self.kv.gpu_free
            # Decode residents go first (swap-out preferred), then partial
            # BE prefills, whose cache can only be dropped for recompute.
            victims = list(reversed(be_resident)) + [
                r for r in reversed(be_prefill) if r.kv_held > 0
            ]
            for victim in victims:
                if ls_kv_pressure <= expected_free:
                    break
                # Swap the victim's cache out when a CPU host can take it;
                # otherwise drop it for recomputation so LS never starves.
                if (
                    victim.phase == "decode"
                    and offload_allowed
                    and self._start_swap_out(victim)
                ):
                    expected_free += victim.kv_held
                    be_resident.remove(victim)
                else:
                    expected_free += victim.kv_held
                    self._preempt_recompute(victim)
                    if victim in be_resident:
                        be_resident.remove(victim)
                        be_prefill = self._ordered(be_prefill + [victim])
                self.counters["evictions"] += 1
        for r in list(ls_decode):
            if not self.kv.alloc_gpu(1):
                self.counters["ls_decode_deferrals"] += 1
                continue
            r.kv_held += 1
            attn_tokens += r.ctx + 1
            reqs += 1
            batch_tokens += 1
            plan.ls_decode.append(r.id)

        # LS chunk prefills, then BE chunk prefills; BE runs under the
        # stricter budget while piggyback work is waiting.
        piggyback_waiting = bool(self.queues.output or self.pending_injections)
        for r in ls_prefill:
            if self.kv.gpu_free <= 0:
                break
            loads = Loads(prefill_units, attn_tokens, reqs, batch_tokens)
            budget = self.slo.decode_layer_budget_us - self._gamma_us(
                batch_tokens + r.remaining_prompt
            )
            q = chunk_prefill_budget(r.prefill_done, r.prefill_target, loads, self.models, budget)
            q = min(q, self.kv.gpu_free)
            self._audit("chunk_prefill", r.id, float(r.remaining_prompt), budget, q)
            if q <= 0:
                continue
            self.kv.alloc_gpu(q)
            r.kv_held += q
            prefill_units += pairwise_units(r.prefill_done, q)
            batch_tokens += q
            plan.ls_prefill_chunks.append((r.id, q))
        for r in be_prefill:
            if self.kv.gpu_free - ls_protect <= 0:
                break
            if r.prefill_done == 0 and r.rebuild_tokens == 0 and not self._be_slot_exists(
                r, ls_protect, offload_allowed
            ):
                continue  # no lifetime slot anywhere; the request stays queued
            loads = Loads(prefill_units, attn_tokens, reqs, batch_tokens)
            base = (
                self.slo.reserved_decode_layer_budget_us
                if piggyback_waiting
                else self.slo.decode_layer_budget_us
            )
            budget = base - self._gamma_us(batch_tokens + r.remaining_prompt)
            q = chunk_prefill_budget(r.prefill_done, r.prefill_target, loads, self.models, budget)
            q = min(q, self.kv.gpu_free - ls_protect)
            self._audit("chunk_prefill_be", r.id, float(r.remaining_prompt), budget, q)
            if q <= 0:
                continue
            self.kv.alloc_gpu(q)
            r.kv_held += q
            prefill_units += pairwise_units(r.prefill_done, q)
            batch_tokens += q
            plan.be_prefill_chunks.append((r.id, q))

        # BE decode placement for GPU residents.
        for r in be_resident:
            loads = Loads(prefill_units, attn_tokens, reqs, batch_tokens)
            decision = be_decode_admit(
                r.ctx, loads, self.models, self.slo, self.kv.gpu_free + r.kv_held
            )
            self._audit(
                "be_decode", r.id, decision.lhs_us, decision.rhs_us, decision.placement.value
            )
            if (
                decision.placement == BePlacement.ON_GPU
                and self.kv.gpu_free > ls_reserve
                and self.kv.alloc_gpu(1)
            ):
                r.kv_held += 1
                attn_tokens += r.ctx + 1
                reqs += 1
                batch_tokens += 1
                plan.be_decode_gpu.append(r.id)
            elif offload_allowed:
                if self._start_swap_out(r):
                    plan.be_offload_cpu.append(r.id)
            # gpu_only: the request keeps its cache and waits for capacity.

        # Swap-back-in directives for offloaded requests. Directive loads
        # are tracked in shadow accumulators for sequencing only; they are
        # not part of this iteration's physical batch.
        if offload_allowed:
            sh_attn, sh_reqs, sh_tokens = attn_tokens, reqs, batch_tokens
            for r in be_offloaded:  # revalidate stale directives first
                if r.swap_state != "in_pending":
                    continue
                loads = Loads(prefill_units, sh_attn, sh_reqs, sh_tokens)
                decision = be_decode_admit(r.ctx, loads, self.models, self.slo, r.ctx)
                if decision.placement == BePlacement.ON_GPU:
                    sh_attn += r.ctx + 1
                    sh_reqs += 1
                    sh_tokens += 1
                else:
                    self._cancel_swap_in(r)
            for r in be_offloaded:
                if r.swap_state != "none" or r.phase != "decode":
                    continue
                loads = Loads(prefill_units, sh_attn, sh_reqs, sh_tokens)
                # The swap-in needs ctx tokens of cache plus one for growth.
                decision = be_decode_admit(
                    r.ctx, loads, self.models, self.slo, self.kv.gpu_free - 1 - ls_reserve
                )
                if decision.placement != BePlacement.ON_GPU:
                    continue
                if not self.kv.alloc_gpu(r.ctx + 1):
                    continue
                r.gpu_reserved = r.ctx + 1
                r.swap_state = "in_pending"
                sh_attn += r.ctx + 1
                sh_reqs += 1
                sh_tokens += 1
                plan.swap_back_in.append(r.id)
                self._log("swap_in_directive", request=r.id)
                at_boundary = r.chain_state in ("none", "inject")
                if not self.opts.delayed_swap_in or at_boundary:
                    if r.chain_state == "inject":
                        self.pending_injections = deque(
                            i for i in self.pending_injections if i.req_id != r.id
                        )
                        r.chain_state = "none"
                    self._start_swap_in(r, self.now)

        # Piggyback admission per layer.
        ready: dict[int, int] = {}
        for item in self.queues.output:
            ready[item.layer] = ready.get(item.layer, 0) + 1
        if self.pending_injections:
            ready[1] = ready.get(1, 0) + len(self.pending_injections)
        loads = Loads(prefill_units, attn_tokens, reqs, batch_tokens)
        if ready:
            plan.piggyback_per_layer = piggyback_budget(
                ready, loads, self.models, self.slo, self.cluster.max_piggyback_per_layer
            )
        plan.loads = loads
        return plan

    def _plan_headroom(self) -> BatchPlan:
        live = self._live()
        state = SchedulerState(
            prefill=[r.view() for r in self._ordered([x for x in live if x.phase == "prefill"])],
            decode=[r.view() for r in self._ordered([x for x in live if x.phase == "decode"])],
        )
        plan = headroom_baseline_plan(
            state,
            self.scenario.headroom_frac,
            self.cluster.gpu_kv_capacity,
            self.opts.headroom_chunk_tokens,
        )
        prefill_units = 0.0
        attn_tokens = 0.0
        reqs = 0
        batch_tokens = 0
        kept: set[str] = set()
        for rid in plan.ls_decode + plan.be_decode_gpu:
            r = self.requests[rid]
            if not self.kv.alloc_gpu(1):
                self.counters["ls_decode_deferrals"] += 1
                continue
            r.kv_held += 1
            kept.add(rid)
            attn_tokens += r.ctx + 1
            reqs += 1
            batch_tokens += 1
        plan.ls_decode = [rid for rid in plan.ls_decode if rid in kept]
        plan.be_decode_gpu = [rid for rid in plan.be_decode_gpu if rid in kept]
        for chunks in (plan.ls_prefill_chunks, plan.be_prefill_chunks):
            kept_chunks = []
            for rid, q in chunks:
                r = self.requests[rid]
                q = min(q, self.kv.gpu_free)
                if q <= 0:
                    continue
                self.kv.alloc_gpu(q)
                r.kv_held += q
                prefill_units += pairwise_units(r.prefill_done, q)
                batch_tokens += q
                kept_chunks.append((rid, q))
            chunks[:] = kept_chunks
        plan.loads = Loads(prefill_units, attn_tokens, reqs, batch_tokens)
        return plan

    # --- iteration execution ---
    #
    # One iteration runs as a chain of per-layer events. At each layer's
    # start the GPU merges the piggyback results that are ready *by that
    # moment* (strict FIFO head-run plus layer-1 injections), bounded by the
    # per-layer admission cap from the budget inequality. This keeps the
    # GPU timeline independent of CPU completion jitter: every result has
    # roughly one full iteration of slack before its merge slot.

    def _merge_cap(self, loads: Loads) -> int:
        """Per-layer piggyback admission bound; computed whenever any chain
        is in flight so consumption stays symmetric across runs."""
        chains_in_flight = (
            bool(self.queues.output)
            or bool(self.pending_injections)
            or any(
                r.chain_state != "none"
                for r in self.requests.values()
                if r.phase == "decode" and isinstance(r.kv_place, int)
            )
        )
        if not chains_in_flight:
            return 0
        return max_piggyback_count(
            loads, self.models, self.slo, self.cluster.max_piggyback_per_layer
        )

    def _start_iteration(self, plan: BatchPlan) -> None:
        merge_cap = self._merge_cap(plan.loads)
        has_work = (
            plan.ls_decode
            or plan.ls_prefill_chunks
            or plan.be_prefill_chunks
            or plan.be_decode_gpu
            or (merge_cap > 0 and (self.queues.output or self.pending_injections))
        )
        if not has_work:
            return  # directives only; no GPU work this pass
        self.gpu_busy = True
        self.counters["iterations"] += 1
        self._iter = _IterationState(
            plan=plan,
            merge_cap=merge_cap,
            start=self.now,
            layer=1,
            merges_total=0,
            merge_layers={},
        )
        self._run_layer()

    def _consume_merges(self, layer: int, cap: int) -> list[ResultItem]:
        taken: list[ResultItem] = []
        while (
            len(taken) < cap
            and self.queues.output
            and self.queues.output[0].layer == layer
        ):
            item = self.queues.output.popleft()
            self.queues.output_deq += 1
            self._log("merge", request=item.req_id, layer=layer, source="queue")
            taken.append(item)
        if layer == 1:
            while len(taken) < cap and self.pending_injections:
                item = self.pending_injections.popleft()
                self.counters["injections"] += 1
                self._log("merge", request=item.req_id, layer=1, source="inject")
                taken.append(item)
        return taken

    def _run_layer(self) -> None:
        it = self._iter
        loads = it.plan.loads
        start = self.now
        merged = self._consume_merges(it.layer, it.merge_cap)
        if merged:
            it.merges_total += len(merged)
            it.merge_layers[it.layer] = len(merged)
            self.counters["merges"] += len(merged)
        gpu_decodes = len(it.plan.ls_decode) + len(it.plan.be_decode_gpu)
        n_l = loads.batch_tokens + len(merged)
        dense_us = self._dense_us(n_l)
        qkv_done = start + self.opts.qkv_time_fraction * dense_us * US
        dur_us = dense_us
        if loads.prefill_units > 0:
            dur_us += probe_attention(
                self.gpu, Phase.PREFILL, loads.prefill_units, rng=self._noise_rng
            )
        if gpu_decodes > 0:
            dur_us += probe_attention(
                self.gpu, Phase.DECODE, loads.attn_tokens, gpu_decodes, rng=self._noise_rng
            )
        dur_us += self.cluster.merge_cost_per_result * len(merged)
        dur_us += self._gamma_us(n_l)
        layer_end = start + dur_us * US
        for item in merged:
            self._process_merge(item, it.layer, qkv_done, layer_end)
        if self.opts.record_layer_times:
            self.layer_start_log.append((it.start, it.layer, start))
        self._push(layer_end, _EV_LAYER_DONE, it.layer)

    def _on_layer_done(self, layer: int) -> None:
        it = self._iter
        if it.layer < self.layers:
            it.layer += 1
            self._run_layer()
            return
        plan = it.plan
        self._log(
            "iteration",
            start=it.start,
            end=self.now,
            decodes=len(plan.ls_decode) + len(plan.be_decode_gpu),
            chunk_tokens=sum(q for _, q in plan.ls_prefill_chunks + plan.be_prefill_chunks),
            merges=it.merges_total,
            prefill_units=plan.loads.prefill_units,
            attn_tokens=plan.loads.attn_tokens,
            batch_tokens=plan.loads.batch_tokens,
            merge_layers={str(k): v for k, v in sorted(it.merge_layers.items())},
        )
        self._iter = None
        self.gpu_busy = False
        self._commit_iteration(plan)

    def _trace_merge(self, req: SimRequest, layer: int) -> None:
        trace = self.traces.setdefault(req.id, [])
        trace.append((layer, "Proj", "GPU"))
        trace.append((layer, "ResidualAdd", "GPU"))
        trace.append((layer, "MLP", "GPU"))
        trace.append((layer, "ResidualAdd", "GPU"))

    def _chain_qkv(self, req: SimRequest, layer: int, time: float) -> None:
        """Residual save + QKV for the chain's next layer, then ship the
        q/k/v to the request's host."""
        self.residuals.put(req.id, layer)
        if self.opts.record_traces:
            self.traces.setdefault(req.id, []).append((layer, "QKV", "GPU"))
        transfer = self._link_us(self._req_host(req), self.cluster.qkv_payload_tokens) * US
        self._enqueue_workitem(req, layer, time + transfer)

    def _process_merge(
        self, item: ResultItem, layer: int, qkv_done: float, layer_end: float
    ) -> None:
        req = self.requests[item.req_id]
        if req.chain_state == "inject":
            # Fresh-token entry: only this layer's QKV runs here.
            self._chain_qkv(req, 1, qkv_done)
            return
        self.residuals.get(req.id, layer)
        if self.opts.record_traces:
            self._trace_merge(req, layer)
        if layer < self.layers:
            self._chain_qkv(req, layer + 1, layer_end)
            return
        # Final layer: the token is complete.
        req.chain_state = "none"
        req.kv_held += 1  # written on the host, inside the lifetime reservation
        self._emit_token(req, layer_end)
        self.counters["be_tokens_cpu"] += 1
        if self.opts.record_traces:
            self.trace_steps.setdefault(req.id, []).append("token")
        if req.tokens_out >= req.output_len:
            self._complete(req, layer_end)
            return
        if req.swap_state == "in_pending":
            # Directive caught the chain at its boundary: transfer now.
            self._start_swap_in(req, layer_end)
            return
        if req.swap_state in ("in_transfer", "in_done"):
            self._maybe_resume_on_gpu(req)
            return
        self._chain_qkv(req, 1, layer_end)

    def _commit_iteration(self, plan: BatchPlan) -> None:
        end = self.now
        for rid in plan.ls_decode + plan.be_decode_gpu:
            req = self.requests[rid]
            if req.phase != "decode":
                continue
            self._emit_token(req, end)
            if self.opts.record_traces:
                self._trace_gpu_pass(rid, "token")
            if req.tokens_out >= req.output_len:
                self._complete(req, end)
        for rid, q in plan.ls_prefill_chunks + plan.be_prefill_chunks:
            req = self.requests[rid]
            req.prefill_done += q
            if self.opts.record_traces:
                self._trace_gpu_pass(rid, "chunk")
            if req.prefill_done >= req.prefill_target:
                req.phase = "decode"
                if req.rebuild_tokens:
                    req.rebuild_tokens = 0  # context rebuilt; no new token yet
                else:
                    self._emit_token(req, end)  # prefill completion produces token 1
                if req.tokens_out >= req.output_len:
                    self._complete(req, end)

    def _trace_gpu_pass(self, rid: str, step: str) -> None:
        trace = self.traces.setdefault(rid, [])
        for layer in range(1, self.layers + 1):
            for module in MODULE_SEQUENCE:
                trace.append((layer, module, "GPU"))
        self.trace_steps.setdefault(rid, []).append(step)

    # --- main loop ---

    def run(self) -> SimReport:
        horizon = self.scenario.horizon_s
        for spec in build_requests(self.scenario.workload, horizon):
            req = SimRequest(spec)
            self.requests[req.id] = req
            self._push(spec.arrival_time, _EV_ARRIVAL, req.id)

        while self._heap:
            time, _, kind, payload = heapq.heappop(self._heap)
            if time > horizon:
                break
            self.now = time
            if kind == _EV_ARRIVAL:
                self._on_arrival(self.requests[payload])
            elif kind == _EV_LAYER_DONE:
                self._on_layer_done(payload)
            elif kind == _EV_WORKITEM:
                self._on_workitem(payload)
            elif kind == _EV_SERVICE_DONE:
                self._on_service_done(*payload)
            elif kind == _EV_RESULT:
                self._on_result(payload)
            elif kind == _EV_SWAP_DONE:
                rid, direction = payload
                req = self.requests[rid]
                if direction == "out":
                    self._finish_swap_out(req)
                else:
                    self._finish_swap_in(req)
            if not self.gpu_busy and self._runnable():
                self._start_iteration(self._plan())

        records = sorted(
            (self._record(r) for r in self.requests.values()),
            key=lambda r: (r.arrival, r.id),
        )
        self.counters["input_queue_enq"] = self.queues.input_enq
        self.counters["input_queue_deq"] = self.queues.input_deq
        self.counters["output_queue_enq"] = self.queues.output_enq
        self.counters["output_queue_deq"] = self.queues.output_deq
        self.counters["residual_puts"] = self.residuals.puts
        self.counters["residual_gets"] = self.residuals.gets
        return build_report(
            records,
            self.slo,
            horizon,
            self.counters,
            config_echo={
                "name": self.scenario.name,
                "model": self.scenario.model,
                "policy": self.scenario.policy,
                "seed": self.scenario.seed,
                "horizon_s": horizon,
            },
        )

    def _record(self, req: SimRequest) -> RequestRecord:
        return RequestRecord(
            id=req.id,
            cls=req.cls,
            prompt_len=req.prompt_len,
            output_len=req.output_len,
            arrival=req.arrival,
            admitted=req.admitted,
            first_token_time=req.first_token_time,
            token_times=list(req.token_times),
            completion=req.completion,
            prefill_tokens_done=req.prefill_done,
            placements=list(req.placement_log),
        )


def run(
    scenario: Scenario,
    models: Optional[LatencyModelSet] = None,
    inject_missing_residual: Optional[tuple[str, int]] = None,
) -> SimReport:
    """Execute one scenario to completion or horizon."""
    return Engine(
        scenario, models=models, inject_missing_residual=inject_missing_residual
    ).run()


# --- trace verification --------------------------------------------------------


def reference_trace(n_passes: int, layers: int) -> list[tuple[int, str]]:
    """Module sequence of a GPU-only execution: one full forward pass per
    prefill chunk or generated token."""
    seq: list[tuple[int, str]] = []
    for _ in range(n_passes):
        for layer in range(1, layers + 1):
            for module in MODULE_SEQUENCE:
                seq.append((layer, module))
    return seq


@dataclass(frozen=True)
class TraceDivergence:
    request_id: str
    index: int
    expected: Optional[tuple]
    actual: Optional[tuple]


def verify_trace(engine: Engine) -> list[TraceDivergence]:
    """Compare every BE request's executed module sequence against a
    GPU-only reference with the same chunk/token structure. Devices may
    differ only on Attn entries."""
    divergences: list[TraceDivergence] = []
    for rid in sorted(engine.traces):
        req = engine.requests[rid]
        if req.cls != ServiceClass.BE:
            continue
        trace = engine.traces[rid]
        expected = reference_trace(len(engine.trace_steps.get(rid, [])), engine.layers)
        for i in range(max(len(expected), len(trace))):
            exp = expected[i] if i < len(expected) else None
            act = trace[i] if i < len(trace) else None
            if exp is None or act is None:
                divergences.append(TraceDivergence(rid, i, exp, act))
                continue
            layer, module, device = act
            if (layer, module) != exp or (module != "Attn" and device != "GPU"):
                divergences.append(TraceDivergence(rid, i, exp, act))
    return divergences
