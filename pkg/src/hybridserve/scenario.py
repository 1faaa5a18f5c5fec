"""Scenario files: one document describing workload, profiles, SLOs and
policy for a simulation run.

The on-disk format is YAML with a versioned schema (see README for the
field reference). Profiles default to the selected model scale and accept
per-field overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .metrics import DEFAULT_SLOS
from .profiles import ClusterProfile, DeviceProfile, default_profiles
from .scheduling import SloConfig, default_piggyback_reserve_us
from .workload import NAMED_LENGTH_SOURCES, LengthDist, WorkloadConfig

SCENARIO_VERSION = 1

POLICIES = ("omniserve", "headroom", "no_admission_control", "gpu_only")


@dataclass(frozen=True)
class EngineOptions:
    record_events: bool = False
    record_layer_times: bool = False
    record_traces: bool = False
    delayed_swap_in: bool = True
    cpu_speed_factor: float = 1.0
    apply_noise: bool = False
    headroom_chunk_tokens: int = 2048
    qkv_time_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if self.cpu_speed_factor <= 0:
            raise ConfigError("cpu_speed_factor must be > 0")
        if not 0 < self.qkv_time_fraction < 1:
            raise ConfigError("qkv_time_fraction must be in (0, 1)")


@dataclass(frozen=True)
class Scenario:
    name: str
    model: str
    gpu_profile: DeviceProfile
    cpu_profile: DeviceProfile
    cluster: ClusterProfile
    slo: SloConfig
    policy: str
    headroom_frac: float
    workload: WorkloadConfig
    horizon_s: float
    seed: int
    engine: EngineOptions = EngineOptions()

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.policy == "headroom" and not 0 < self.headroom_frac < 1:
            raise ConfigError("headroom policy needs headroom_frac in (0, 1)")
        if self.horizon_s <= 0:
            raise ConfigError("horizon must be > 0")


def parse_policy(text: str) -> tuple[str, float]:
    """Parse a policy spec of the form `name` or `name:param`."""
    name, _, param = text.partition(":")
    if name not in POLICIES:
        raise ConfigError(f"unknown policy {name!r} (choose from {POLICIES})")
    frac = float(param) if param else 0.2
    return name, frac


def _length_dist_from(doc: dict) -> LengthDist:
    if "source" in doc:
        source = doc["source"]
        if source not in NAMED_LENGTH_SOURCES:
            raise ConfigError(f"unknown length source {source!r}")
        return NAMED_LENGTH_SOURCES[source](
            n=int(doc.get("n", 512)), seed=int(doc.get("seed", 1))
        )
    kind = doc.get("kind")
    if kind == "fixed":
        return LengthDist(kind="fixed", prompt=int(doc["prompt"]), output=int(doc["output"]))
    if kind == "uniform":
        return LengthDist(
            kind="uniform",
            prompt_min=int(doc["prompt_min"]),
            prompt_max=int(doc["prompt_max"]),
            output_min=int(doc["output_min"]),
            output_max=int(doc["output_max"]),
        )
    if kind == "empirical":
        return LengthDist(
            kind="empirical", pairs=tuple((int(p), int(o)) for p, o in doc["pairs"])
        )
    raise ConfigError(f"length distribution needs a known kind or source, got {doc!r}")


def _workload_from(doc: dict) -> WorkloadConfig:
    ls = doc.get("ls", {}) or {}
    be = doc.get("be", {}) or {}
    schedule = tuple((float(t), float(r)) for t, r in ls.get("schedule", []))
    trace = be.get("trace", {}) or {}
    return WorkloadConfig(
        ls_rate=float(ls.get("rate", 0.0)),
        ls_rate_schedule=schedule,
        be_rate=float(trace.get("rate", 0.0)),
        be_trace=tuple(float(t) for t in trace.get("times", [])),
        ls_lengths=_length_dist_from(ls["lengths"]) if "lengths" in ls else None,
        be_lengths=_length_dist_from(be["lengths"]) if "lengths" in be else None,
        seed=int(doc.get("seed", 0)),
    )


def _override(profile, overrides: dict):
    if not overrides:
        return profile
    valid = {f.name for f in dataclasses.fields(profile)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(f"unknown profile fields: {sorted(unknown)}")
    typed = {}
    for key, value in overrides.items():
        if key in ("pcie", "network", "tp_comm", "pp_comm"):
            typed[key] = tuple(float(v) for v in value)
        else:
            typed[key] = value
    return dataclasses.replace(profile, **typed)


def scenario_from_dict(doc: dict, name: str = "scenario") -> Scenario:
    if doc.get("version", SCENARIO_VERSION) != SCENARIO_VERSION:
        raise ConfigError(f"unsupported scenario version {doc.get('version')!r}")
    model = str(doc.get("model", "34B"))
    gpu, cpu, cluster = default_profiles(model)
    profiles_doc = doc.get("profiles", {}) or {}
    gpu = _override(gpu, profiles_doc.get("gpu", {}))
    cpu = _override(cpu, profiles_doc.get("cpu", {}))
    cluster = _override(cluster, profiles_doc.get("cluster", {}))

    slo_doc = doc.get("slo", {}) or {}
    ttft_default, tpot_default = DEFAULT_SLOS[model]
    reserve = slo_doc.get("piggyback_reserve_us")
    if reserve is None:
        reserve = default_piggyback_reserve_us(gpu, cluster)
    slo = SloConfig(
        ttft_s=float(slo_doc.get("ttft_s", ttft_default)),
        tpot_s=float(slo_doc.get("tpot_s", tpot_default)),
        num_layers=cluster.layers,
        piggyback_reserve_us=float(reserve),
    )

    policy, frac = parse_policy(str(doc.get("policy", "omniserve")))
    engine_doc = doc.get("engine", {}) or {}
    engine = EngineOptions(
        record_events=bool(engine_doc.get("events", False)),
        record_layer_times=bool(engine_doc.get("layer_times", False)),
        record_traces=bool(engine_doc.get("trace", False)),
        delayed_swap_in=bool(engine_doc.get("delayed_swap_in", True)),
        cpu_speed_factor=float(engine_doc.get("cpu_speed_factor", 1.0)),
        apply_noise=bool(engine_doc.get("noise", False)),
        headroom_chunk_tokens=int(engine_doc.get("headroom_chunk_tokens", 2048)),
    )

    return Scenario(
        name=str(doc.get("name", name)),
        model=model,
        gpu_profile=gpu,
        cpu_profile=cpu,
        cluster=cluster,
        slo=slo,
        policy=policy,
        headroom_frac=float(doc.get("headroom_frac", frac)),
        workload=_workload_from(doc.get("workload", {}) or {}),
        horizon_s=float(doc.get("horizon_s", 60.0)),
        seed=int(doc.get("seed", 0)),
        engine=engine,
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: scenario file must be a mapping")
    return scenario_from_dict(doc, name=path.stem)


def with_policy(scenario: Scenario, policy_text: str) -> Scenario:
    name, frac = parse_policy(policy_text)
    return dataclasses.replace(scenario, policy=name, headroom_frac=frac)


def with_seed(scenario: Scenario, seed: int) -> Scenario:
    return dataclasses.replace(scenario, seed=seed)
