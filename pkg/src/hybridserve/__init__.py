"""hybridserve: a discrete-event simulator for SLO-aware hybrid LS/BE LLM
serving with CPU attention offload and piggybacked post-attention compute."""

from .engine import Engine, run, verify_trace
from .latency import (
    build_dense_table,
    comm_latency,
    fit_decode_attn,
    fit_model_set,
    fit_prefill_attn,
    per_layer_latency,
    predict_decode_attn,
    predict_dense,
    predict_prefill_attn,
)
from .metrics import DEFAULT_SLOS, SimReport, attainment, be_throughput, tpot_series, ttft
from .profiles import DeviceProfile, ClusterProfile, default_profiles, probe_attention, probe_dense
from .scenario import Scenario, load_scenario, scenario_from_dict
from .scheduling import (
    SloConfig,
    admit_ls,
    be_decode_admit,
    chunk_prefill_budget,
    compute_loads,
    headroom_baseline_plan,
    piggyback_budget,
    schedule_order,
)
from .workload import (
    LengthDist,
    RequestSpec,
    ServiceClass,
    WorkloadConfig,
    gen_dynamic_rate_arrivals,
    gen_poisson_arrivals,
    sample_lengths,
)

__version__ = "0.1.0"
