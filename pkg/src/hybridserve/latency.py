"""Analytical latency models fitted from device-profile probes.

Three model families cover one transformer layer:

* prefill attention: affine in the pairwise-token computation load,
* decode attention: affine in (context tokens, batched request count),
* dense modules: piecewise-linear table built by recursive interval
  splitting, which isolates the ladder spikes of the dense cost curve with
  O(spikes * log n) probes.

Communication follows the alpha-beta model per link/collective. The fitted
models are immutable; prediction is pure evaluation and safe to share.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, FitDegenerateError
from .profiles import ClusterProfile, DeviceClass, DeviceProfile, Phase, probe_attention, probe_dense

MODEL_DOC_VERSION = 1


@dataclass(frozen=True)
class PrefillAttnModel:
    per_unit: float  # µs per pairwise-token unit
    base: float      # µs

    def __post_init__(self):
        if self.per_unit < 0:
            raise ConfigError("prefill attention slope must be >= 0")


@dataclass(frozen=True)
class DecodeAttnModel:
    per_token: float    # µs per context token
    per_request: float  # µs per batched request; may be negative
    base: float         # µs

    def __post_init__(self):
        if self.per_token < 0:
            raise ConfigError("decode attention token slope must be >= 0")


@dataclass(frozen=True)
class Segment:
    n_start: int
    n_end: int
    slope: float
    intercept: float


@dataclass
class DenseLatencyTable:
    """Piecewise-linear dense latency over [min_n, max_n].

    Segments are contiguous, non-overlapping and cover the domain. Queries
    above max_n extrapolate with the last segment and bump
    `extrapolation_count` (diagnostic only).
    """

    segments: list[Segment]
    min_n: int
    max_n: int
    threshold: float
    extrapolation_count: int = 0
    _starts: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.segments:
            raise ConfigError("dense table needs at least one segment")
        prev_end = None
        for seg in self.segments:
            if seg.n_start > seg.n_end:
                raise ConfigError("segment bounds inverted")
            if prev_end is not None and seg.n_start != prev_end + 1:
                raise ConfigError("segments must be contiguous and non-overlapping")
            prev_end = seg.n_end
        if self.segments[0].n_start != self.min_n or self.segments[-1].n_end != self.max_n:
            raise ConfigError("segments must cover the table domain")
        self._starts = [s.n_start for s in self.segments]


class CommKind(str, Enum):
    TENSOR_PARALLEL = "tensor_parallel"
    PIPELINE = "pipeline"
    PCIE = "pcie"
    NETWORK = "network"


@dataclass(frozen=True)
class CommModel:
    kind: CommKind
    alpha: float  # µs
    beta: float   # µs per token of transfer volume

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("comm coefficients must be >= 0")


@dataclass(frozen=True)
class FitDiagnostics:
    n_samples: int
    rmse: float
    max_abs_err: float
    mean_rel_err: float


@dataclass(frozen=True)
class DenseBuildDiagnostics:
    probe_calls: int
    n_segments: int
    nonmonotone: bool


@dataclass
class LatencyModelSet:
    """Complete fitted model set for one device class."""

    device_class: DeviceClass
    prefill_attn: PrefillAttnModel
    decode_attn: DecodeAttnModel
    dense: DenseLatencyTable
    comm: list[CommModel]

    def __post_init__(self):
        collectives = [
            m for m in self.comm
            if m.kind in (CommKind.TENSOR_PARALLEL, CommKind.PIPELINE)
        ]
        self._gamma_alpha = sum(m.alpha for m in collectives)
        self._gamma_beta = sum(m.beta for m in collectives)

    def gamma(self, tokens: float) -> float:
        """Per-layer collective-communication budget for a batch of
        `tokens`: the sum of the parallelism collectives' alpha-beta costs
        (tensor-parallel, plus pipeline when staged)."""
        if tokens == 0:
            return 0.0
        return self._gamma_alpha + self._gamma_beta * tokens


# --- fitting -----------------------------------------------------------------


def fit_prefill_attn(
    samples: Sequence[tuple[float, float]],
) -> tuple[PrefillAttnModel, FitDiagnostics]:
    """Least-squares fit of duration = per_unit * load + base."""
    if len(samples) < 2 or len({c for c, _ in samples}) < 2:
        raise FitDegenerateError("prefill attention fit needs >= 2 distinct loads")
    c = np.array([s[0] for s in samples], dtype=float)
    y = np.array([s[1] for s in samples], dtype=float)
    design = np.column_stack([c, np.ones_like(c)])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 2:
        raise FitDegenerateError("prefill attention sample design is rank-deficient")
    model = PrefillAttnModel(per_unit=float(coef[0]), base=float(coef[1]))
    return model, _diagnostics(design @ coef, y)


def fit_decode_attn(
    samples: Sequence[tuple[float, int, float]],
) -> tuple[DecodeAttnModel, FitDiagnostics]:
    """Two-variable least-squares fit of
    duration = per_token * context + per_request * reqs + base."""
    if len(samples) < 3 or len({g for _, g, _ in samples}) < 2:
        raise FitDegenerateError("decode attention fit needs >= 3 samples over >= 2 request counts")
    c = np.array([s[0] for s in samples], dtype=float)
    g = np.array([s[1] for s in samples], dtype=float)
    y = np.array([s[2] for s in samples], dtype=float)
    design = np.column_stack([c, g, np.ones_like(c)])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 3:
        raise FitDegenerateError("decode attention sample design is collinear")
    model = DecodeAttnModel(
        per_token=float(coef[0]), per_request=float(coef[1]), base=float(coef[2])
    )
    return model, _diagnostics(design @ coef, y)


def _diagnostics(pred: np.ndarray, obs: np.ndarray) -> FitDiagnostics:
    err = pred - obs
    denom = np.where(np.abs(obs) > 0, np.abs(obs), 1.0)
    return FitDiagnostics(
        n_samples=len(obs),
        rmse=float(np.sqrt(np.mean(err**2))),
        max_abs_err=float(np.max(np.abs(err))),
        mean_rel_err=float(np.mean(np.abs(err) / denom)),
    )


def build_dense_table(
    probe: Callable[[int], float],
    min_n: int,
    max_n: int,
    threshold: Optional[float] = None,
) -> tuple[DenseLatencyTable, DenseBuildDiagnostics]:
    """Build the piecewise-linear dense table by recursive splitting.

    An interval whose endpoint latencies differ by at most `threshold` is
    interpolated linearly; otherwise it is split at the integer midpoint and
    both halves are modeled recursively. The default threshold is the probe
    difference between input sizes 1 and 16. Probe results are memoized so
    the call count stays proportional to spikes * log(range).

    The probe must be deterministic during the build (noise disabled).
    """
    if min_n < 1 or max_n <= min_n:
        raise ConfigError("need 1 <= min_n < max_n")

    cache: dict[int, float] = {}
    calls = 0

    def latency(n: int) -> float:
        nonlocal calls
        if n not in cache:
            calls += 1
            cache[n] = float(probe(n))
        return cache[n]

    if threshold is None:
        hi_ref = min(16, max_n)
        threshold = latency(hi_ref) - latency(1)

    segments: list[Segment] = []

    def modeling(lo: int, hi: int) -> None:
        lo_lat = latency(lo)
        if lo == hi:
            segments.append(Segment(lo, hi, 0.0, lo_lat))
            return
        hi_lat = latency(hi)
        if hi_lat - lo_lat <= threshold:
            slope = (hi_lat - lo_lat) / (hi - lo)
            segments.append(Segment(lo, hi, slope, lo_lat - slope * lo))
            return
        mid = (lo + hi) // 2
        latency(mid)
        modeling(lo, mid)
        modeling(mid + 1, hi)

    modeling(min_n, max_n)

    probed = sorted(cache.items())
    nonmonotone = any(b[1] < a[1] for a, b in zip(probed, probed[1:]))
    table = DenseLatencyTable(
        segments=segments, min_n=min_n, max_n=max_n, threshold=threshold
    )
    return table, DenseBuildDiagnostics(
        probe_calls=calls, n_segments=len(segments), nonmonotone=nonmonotone
    )


# --- prediction --------------------------------------------------------------


def predict_prefill_attn(model: PrefillAttnModel, load: float) -> float:
    if load < 0:
        raise ConfigError("prefill attention load must be >= 0")
    return model.per_unit * load + model.base


def predict_decode_attn(model: DecodeAttnModel, context_tokens: float, reqs: int) -> float:
    if context_tokens < 0 or reqs < 0:
        raise ConfigError("decode attention loads must be >= 0")
    return model.per_token * context_tokens + model.per_request * reqs + model.base


def predict_dense(table: DenseLatencyTable, n: int) -> float:
    """Dense latency at n query tokens; n=0 means the kernel is skipped."""
    if n < 0:
        raise ConfigError("dense token count must be >= 0")
    if n == 0:
        return 0.0
    if n > table.max_n:
        table.extrapolation_count += 1
        seg = table.segments[-1]
    else:
        idx = bisect.bisect_right(table._starts, n) - 1
        seg = table.segments[max(idx, 0)]
    return seg.slope * n + seg.intercept


def comm_latency(model: CommModel, tokens: float) -> float:
    """Alpha-beta transfer cost; zero tokens issues no transfer."""
    if tokens < 0:
        raise ConfigError("transfer volume must be >= 0")
    if tokens == 0:
        return 0.0
    return model.alpha + model.beta * tokens


class LayerCost(NamedTuple):
    compute: float  # µs: prefill attn + decode attn + dense
    comm: float     # µs: collective budget, applied on the SLO side


def per_layer_latency(
    models: LatencyModelSet,
    prefill_units: float,
    decode_context: float,
    reqs: int,
    batch_tokens: int,
) -> LayerCost:
    """Predicted single-layer cost for the given loads.

    The compute part is the plain sum of the three module predictions; the
    communication budget is reported separately so callers can deduct it
    from the per-layer SLO budget.
    """
    compute = (
        predict_prefill_attn(models.prefill_attn, prefill_units)
        + predict_decode_attn(models.decode_attn, decode_context, reqs)
        + predict_dense(models.dense, batch_tokens)
    )
    return LayerCost(compute=compute, comm=models.gamma(batch_tokens))


# --- profile-driven fitting --------------------------------------------------


def comm_models_for(cluster: ClusterProfile) -> list[CommModel]:
    """Comm models implied by the deployment: parallelism collectives plus
    the PCIe and network links."""
    models = [
        CommModel(CommKind.PCIE, *cluster.pcie),
        CommModel(CommKind.NETWORK, *cluster.network),
    ]
    if cluster.tp_degree > 1:
        models.insert(0, CommModel(CommKind.TENSOR_PARALLEL, *cluster.tp_comm))
    if cluster.pp_degree > 1:
        models.insert(1, CommModel(CommKind.PIPELINE, *cluster.pp_comm))
    return models


@dataclass(frozen=True)
class FitBudget:
    """Sampling ranges for profile-driven fitting."""

    n_samples: int = 100
    max_prefill_units: float = 40_000_000.0
    max_context: int = 16_384
    max_reqs: int = 64
    max_batch_tokens: int = 8_192


def fit_model_set(
    profile: DeviceProfile,
    cluster: ClusterProfile,
    budget: FitBudget = FitBudget(),
    seed: int = 0,
) -> tuple[LatencyModelSet, dict]:
    """Probe one device profile and fit its complete model set.

    Attention samples are drawn with the profile's configured noise; the
    dense table is built against the noise-free probe as required by the
    interpolation algorithm.
    """
    rng = np.random.default_rng(seed)

    pa_samples = []
    for _ in range(budget.n_samples):
        c = float(rng.uniform(1.0, budget.max_prefill_units))
        pa_samples.append((c, probe_attention(profile, Phase.PREFILL, c, rng=rng)))
    pa_model, pa_diag = fit_prefill_attn(pa_samples)

    da_samples = []
    for _ in range(budget.n_samples):
        g = int(rng.integers(1, budget.max_reqs + 1))
        c = float(g * rng.uniform(1.0, budget.max_context))
        da_samples.append((c, g, probe_attention(profile, Phase.DECODE, c, g, rng=rng)))
    da_model, da_diag = fit_decode_attn(da_samples)

    table, dense_diag = build_dense_table(
        lambda n: probe_dense(profile, n), 1, budget.max_batch_tokens
    )

    model_set = LatencyModelSet(
        device_class=profile.device_class,
        prefill_attn=pa_model,
        decode_attn=da_model,
        dense=table,
        comm=comm_models_for(cluster),
    )
    diagnostics = {
        "prefill_attn": pa_diag,
        "decode_attn": da_diag,
        "dense": dense_diag,
    }
    return model_set, diagnostics


def evaluate_model_set(
    model_set: LatencyModelSet,
    profile: DeviceProfile,
    budget: FitBudget = FitBudget(),
    n_points: int = 1000,
    seed: int = 1,
) -> dict[str, float]:
    """Held-out accuracy (1 - mean relative error) per model against fresh
    probe observations, drawn with the profile's configured noise."""
    rng = np.random.default_rng(seed)

    errs = []
    for _ in range(n_points):
        c = float(rng.uniform(1.0, budget.max_prefill_units))
        obs = probe_attention(profile, Phase.PREFILL, c, rng=rng)
        errs.append(abs(predict_prefill_attn(model_set.prefill_attn, c) - obs) / obs)
    pa_acc = 1.0 - float(np.mean(errs))

    errs = []
    for _ in range(n_points):
        g = int(rng.integers(1, budget.max_reqs + 1))
        c = float(g * rng.uniform(1.0, budget.max_context))
        obs = probe_attention(profile, Phase.DECODE, c, g, rng=rng)
        errs.append(abs(predict_decode_attn(model_set.decode_attn, c, g) - obs) / obs)
    da_acc = 1.0 - float(np.mean(errs))

    errs = []
    for _ in range(n_points):
        n = int(rng.integers(1, budget.max_batch_tokens + 1))
        obs = probe_dense(profile, n, rng=rng)
        errs.append(abs(predict_dense(model_set.dense, n) - obs) / obs)
    dense_acc = 1.0 - float(np.mean(errs))

    return {"prefill_attn": pa_acc, "decode_attn": da_acc, "dense": dense_acc}


# --- serialization -----------------------------------------------------------


def model_set_to_dict(model_set: LatencyModelSet) -> dict:
    return {
        "version": MODEL_DOC_VERSION,
        "device_class": model_set.device_class.value,
        "prefill_attn": {
            "per_unit": model_set.prefill_attn.per_unit,
            "base": model_set.prefill_attn.base,
        },
        "decode_attn": {
            "per_token": model_set.decode_attn.per_token,
            "per_request": model_set.decode_attn.per_request,
            "base": model_set.decode_attn.base,
        },
        "dense": {
            "min_n": model_set.dense.min_n,
            "max_n": model_set.dense.max_n,
            "threshold": model_set.dense.threshold,
            "segments": [
                [s.n_start, s.n_end, s.slope, s.intercept] for s in model_set.dense.segments
            ],
        },
        "comm": [
            {"kind": m.kind.value, "alpha": m.alpha, "beta": m.beta} for m in model_set.comm
        ],
    }


def model_set_from_dict(doc: dict) -> LatencyModelSet:
    if doc.get("version") != MODEL_DOC_VERSION:
        raise ConfigError(f"unsupported model document version {doc.get('version')!r}")
    dense = DenseLatencyTable(
        segments=[Segment(int(a), int(b), float(s), float(i)) for a, b, s, i in doc["dense"]["segments"]],
        min_n=int(doc["dense"]["min_n"]),
        max_n=int(doc["dense"]["max_n"]),
        threshold=float(doc["dense"]["threshold"]),
    )
    return LatencyModelSet(
        device_class=DeviceClass(doc["device_class"]),
        prefill_attn=PrefillAttnModel(**doc["prefill_attn"]),
        decode_attn=DecodeAttnModel(**doc["decode_attn"]),
        dense=dense,
        comm=[CommModel(CommKind(m["kind"]), m["alpha"], m["beta"]) for m in doc["comm"]],
    )
