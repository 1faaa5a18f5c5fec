"""Synthetic device cost oracles.

The simulation never touches real hardware: every operation is charged time
from a `DeviceProfile`, and the latency models are fitted against the same
profiles, so model accuracy is exactly measurable. All costs are in
microseconds.

Default coefficients are calibrated so that the CPU:GPU cost ratios at the
reference probe points (context/prompt length 1000, batch size 1 and 10)
match published measurement gaps for a tensor-parallel 70B-class deployment:

    decode attention   2.34x (1 req)   7.58x (10 reqs)
    dense (MLP path)   65.2x (n=1)     498.1x (n=10)
    prefill attention  184.6x (1 req)  393.75x (10 reqs)

The dense model family (ladder with a fixed per-token slope) cannot also
represent the prefill-phase dense gaps at n=1000/10000; the decode points
above take precedence. Ratios at other lengths are linear extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigError


class DeviceClass(str, Enum):
    GPU = "GPU"
    CPU = "CPU"


class Phase(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class DeviceProfile:
    """Ground-truth cost coefficients for one device class (all µs).

    Dense cost rises in a ladder: a fixed step is paid every `dense_tile`
    tokens (new thread-block allocation), linear in between. Attention is
    linear in computation load; decode attention additionally carries a
    per-request term. `attn_prefill_base` is not part of the published
    coefficient set but the probe contract needs an explicit intercept.
    """

    device_class: DeviceClass
    dense_base: float
    dense_per_token: float
    dense_tile: int
    dense_step: float
    attn_prefill_per_unit: float
    attn_prefill_base: float
    attn_decode_per_unit: float
    attn_decode_per_req: float
    attn_decode_base: float
    noise_rel: float = 0.0

    def __post_init__(self):
        coeffs = (
            self.dense_base,
            self.dense_per_token,
            self.dense_step,
            self.attn_prefill_per_unit,
            self.attn_prefill_base,
            self.attn_decode_per_unit,
            self.attn_decode_per_req,
            self.attn_decode_base,
        )
        if any(c < 0 for c in coeffs):
            raise ConfigError("cost coefficients must be >= 0")
        if self.dense_tile < 1:
            raise ConfigError("dense_tile must be >= 1")
        if not (0 <= self.noise_rel < 0.1):
            raise ConfigError("noise_rel must be in [0, 0.1)")


@dataclass(frozen=True)
class ClusterProfile:
    """Deployment shape: GPU parallelism, CPU hosts, capacities and links.

    Link models are (alpha µs, beta µs/token); one "token" of transfer
    volume is a token's full-model KV footprint. Small payloads (per-layer
    q/k/v vectors, attention results) are charged as token-equivalents via
    `qkv_payload_tokens` / `result_payload_tokens`.
    """

    gpu_count: int
    tp_degree: int
    pp_degree: int
    layers: int
    cpu_hosts: int
    cpu_cores_per_host: int
    cpu_mem_tokens: int
    gpu_kv_capacity: int
    pcie: tuple[float, float]
    network: tuple[float, float]
    tp_comm: tuple[float, float] = (0.0, 0.0)
    pp_comm: tuple[float, float] = (0.0, 0.0)
    qkv_payload_tokens: float = 0.02
    result_payload_tokens: float = 0.01
    merge_cost_per_result: float = 1.25
    max_piggyback_per_layer: int = 400

    def __post_init__(self):
        if self.tp_degree * self.pp_degree != self.gpu_count:
            raise ConfigError("tp_degree * pp_degree must equal gpu_count")
        if self.layers % self.pp_degree != 0:
            raise ConfigError("layers must divide evenly across pipeline stages")
        if min(self.cpu_mem_tokens, self.gpu_kv_capacity) <= 0:
            raise ConfigError("capacities must be > 0")
        if self.cpu_hosts < 1 or self.cpu_cores_per_host < 1:
            raise ConfigError("need at least one CPU host with one core")


def _noise_factor(noise_rel: float, rng: Optional[np.random.Generator]) -> float:
    """Seeded multiplicative jitter: log-normal with the log magnitude
    clipped so the relative perturbation never exceeds noise_rel."""
    if noise_rel <= 0 or rng is None:
        return 1.0
    z = float(np.clip(rng.standard_normal(), -2.5, 2.5))
    return math.exp(noise_rel / 2.5 * z)


def probe_dense(
    profile: DeviceProfile, n_tokens: int, rng: Optional[np.random.Generator] = None
) -> float:
    """Dense-module (QKV + proj + MLP) time for a batch of n_tokens, µs."""
    if n_tokens < 1:
        raise ConfigError("probe_dense requires n_tokens >= 1")
    base = (
        profile.dense_base
        + profile.dense_per_token * n_tokens
        + profile.dense_step * math.ceil(n_tokens / profile.dense_tile)
    )
    return base * _noise_factor(profile.noise_rel, rng)


def probe_attention(
    profile: DeviceProfile,
    phase: Phase,
    c_load: float,
    g_reqs: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Attention time (µs) for the given computation load.

    Prefill load is in pairwise-token units (sum of attended positions);
    decode load is total context tokens with g_reqs the batched request
    count.
    """
    if c_load < 0 or g_reqs < 0:
        raise ConfigError("attention loads must be >= 0")
    if phase == Phase.PREFILL:
        base = profile.attn_prefill_per_unit * c_load + profile.attn_prefill_base
    else:
        base = (
            profile.attn_decode_per_unit * c_load
            + profile.attn_decode_per_req * g_reqs
            + profile.attn_decode_base
        )
    return base * _noise_factor(profile.noise_rel, rng)


# Calibrated 70B-class coefficients (see module docstring).
_GPU_70B = DeviceProfile(
    device_class=DeviceClass.GPU,
    dense_base=40.0,
    dense_per_token=0.05,
    dense_tile=256,
    dense_step=12.0,
    attn_prefill_per_unit=0.002,
    attn_prefill_base=1441.62,
    attn_decode_per_unit=0.02,
    attn_decode_per_req=4.0,
    attn_decode_base=84.07,
)

_CPU_70B = DeviceProfile(
    device_class=DeviceClass.CPU,
    dense_base=800.15,
    dense_per_token=2528.51,
    dense_tile=1 << 20,
    dense_step=65.0,
    attn_prefill_per_unit=0.9009141,
    attn_prefill_base=0.0,
    attn_decode_per_unit=0.2247792,
    attn_decode_per_req=20.0,
    attn_decode_base=7.9266,
)


def _scaled(profile: DeviceProfile, factor: float) -> DeviceProfile:
    """Scale every time coefficient; CPU:GPU ratios are preserved when both
    devices are scaled by the same factor."""
    return replace(
        profile,
        dense_base=profile.dense_base * factor,
        dense_per_token=profile.dense_per_token * factor,
        dense_step=profile.dense_step * factor,
        attn_prefill_per_unit=profile.attn_prefill_per_unit * factor,
        attn_prefill_base=profile.attn_prefill_base * factor,
        attn_decode_per_unit=profile.attn_decode_per_unit * factor,
        attn_decode_per_req=profile.attn_decode_per_req * factor,
        attn_decode_base=profile.attn_decode_base * factor,
    )


def default_profiles(model: str) -> tuple[DeviceProfile, DeviceProfile, ClusterProfile]:
    """Default (GPU profile, CPU profile, cluster) for "34B" or "70B".

    70B deploys with 4-way tensor parallelism over 80 layers; 34B with
    2-way over 60 layers at ~0.6x the per-layer cost.
    """
    if model == "70B":
        cluster = ClusterProfile(
            gpu_count=4,
            tp_degree=4,
            pp_degree=1,
            layers=80,
            cpu_hosts=5,
            cpu_cores_per_host=24,
            cpu_mem_tokens=1_000_000,
            gpu_kv_capacity=200_000,
            pcie=(5.0, 12.0),
            network=(30.0, 40.0),
            tp_comm=(8.0, 0.004),
        )
        return _GPU_70B, _CPU_70B, cluster
    if model == "34B":
        cluster = ClusterProfile(
            gpu_count=2,
            tp_degree=2,
            pp_degree=1,
            layers=60,
            cpu_hosts=5,
            cpu_cores_per_host=24,
            cpu_mem_tokens=1_500_000,
            gpu_kv_capacity=400_000,
            pcie=(5.0, 8.0),
            network=(30.0, 28.0),
            tp_comm=(5.0, 0.002),
        )
        return _scaled(_GPU_70B, 0.6), _scaled(_CPU_70B, 0.6), cluster
    raise ConfigError(f"unknown model {model!r} (expected '34B' or '70B')")
