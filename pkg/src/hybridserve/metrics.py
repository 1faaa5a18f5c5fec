"""Per-request records, SLO attainment and throughput aggregation.

Pure post-processing over immutable simulation output. TPOT attainment is
counted per token; per-request P99 summaries are also reported. Requests
whose first token has not appeared by the horizon count as TTFT violations
only once their TTFT budget has provably elapsed (right-censoring).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .scheduling import SloConfig
from .workload import ServiceClass

REPORT_VERSION = 1

# Default SLO targets per model scale: (TTFT seconds, TPOT seconds).
DEFAULT_SLOS = {"34B": (2.0, 0.2), "70B": (3.0, 0.25)}


@dataclass
class RequestRecord:
    id: str
    cls: ServiceClass
    prompt_len: int
    output_len: int
    arrival: float
    admitted: bool
    first_token_time: Optional[float] = None
    token_times: list[float] = field(default_factory=list)
    completion: Optional[float] = None
    prefill_tokens_done: int = 0
    placements: list[tuple[float, str]] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.token_times, self.token_times[1:])):
            raise ConfigError(f"{self.id}: token times must be strictly increasing")
        if self.first_token_time is not None and self.first_token_time < self.arrival:
            raise ConfigError(f"{self.id}: first token precedes arrival")


def ttft(record: RequestRecord) -> float:
    """Time to first token; undefined for requests with no tokens."""
    if record.first_token_time is None:
        raise ConfigError(f"{record.id}: no first token")
    return record.first_token_time - record.arrival


def tpot_series(record: RequestRecord) -> list[float]:
    """Successive inter-token gaps after the first token."""
    return [b - a for a, b in zip(record.token_times, record.token_times[1:])]


def attainment(
    records: list[RequestRecord], slo: SloConfig, horizon: Optional[float] = None
) -> tuple[float, float]:
    """(TTFT fraction, TPOT fraction) for the LS class.

    TTFT: fraction of admitted LS requests whose first token met the
    target. Requests still waiting at the horizon count as violations only
    if more than the TTFT budget has already elapsed. TPOT: fraction of LS
    inter-token gaps within the target. Rejected requests are excluded
    (reported separately on the SimReport).
    """
    ttft_ok = ttft_total = 0
    tpot_ok = tpot_total = 0
    for r in records:
        if r.cls != ServiceClass.LS or not r.admitted:
            continue
        if r.first_token_time is not None:
            ttft_total += 1
            ttft_ok += ttft(r) <= slo.ttft_s
        elif horizon is not None and horizon - r.arrival > slo.ttft_s:
            ttft_total += 1
        for gap in tpot_series(r):
            tpot_total += 1
            tpot_ok += gap <= slo.tpot_s
    ttft_frac = ttft_ok / ttft_total if ttft_total else 1.0
    tpot_frac = tpot_ok / tpot_total if tpot_total else 1.0
    return ttft_frac, tpot_frac


def be_throughput(records: list[RequestRecord], horizon: float) -> tuple[float, float]:
    """BE (prefill tokens/s, decode tokens/s) over the active horizon."""
    if horizon <= 0:
        raise ConfigError("horizon must be > 0")
    prefill = sum(r.prefill_tokens_done for r in records if r.cls == ServiceClass.BE)
    decode = sum(len(r.token_times) for r in records if r.cls == ServiceClass.BE)
    return prefill / horizon, decode / horizon


def ls_decode_throughput(records: list[RequestRecord], horizon: float) -> float:
    """LS decode tokens per second (tokens beyond the first)."""
    if horizon <= 0:
        raise ConfigError("horizon must be > 0")
    tokens = sum(
        max(0, len(r.token_times) - 1) for r in records if r.cls == ServiceClass.LS
    )
    return tokens / horizon


def _tpot_p99(records: list[RequestRecord]) -> Optional[float]:
    gaps = [g for r in records if r.cls == ServiceClass.LS for g in tpot_series(r)]
    return float(np.percentile(gaps, 99)) if gaps else None


@dataclass
class SimReport:
    records: list[RequestRecord]
    ttft_attainment: float
    tpot_attainment: float
    be_prefill_tput: float
    be_decode_tput: float
    ls_decode_tput: float
    ls_rejected: int
    tpot_p99: Optional[float]
    counters: dict[str, int]
    config_echo: dict

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "ttft_attainment": self.ttft_attainment,
            "tpot_attainment": self.tpot_attainment,
            "be_prefill_tput": self.be_prefill_tput,
            "be_decode_tput": self.be_decode_tput,
            "ls_decode_tput": self.ls_decode_tput,
            "ls_rejected": self.ls_rejected,
            "tpot_p99": self.tpot_p99,
            "counters": dict(sorted(self.counters.items())),
            "config_echo": self.config_echo,
            "records": [
                {
                    "id": r.id,
                    "cls": r.cls.value,
                    "prompt_len": r.prompt_len,
                    "output_len": r.output_len,
                    "arrival": r.arrival,
                    "admitted": r.admitted,
                    "first_token_time": r.first_token_time,
                    "token_times": r.token_times,
                    "completion": r.completion,
                    "prefill_tokens_done": r.prefill_tokens_done,
                    "placements": [[t, p] for t, p in r.placements],
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SimReport":
        if doc.get("version") != REPORT_VERSION:
            raise ConfigError(f"unsupported report version {doc.get('version')!r}")
        records = [
            RequestRecord(
                id=r["id"],
                cls=ServiceClass(r["cls"]),
                prompt_len=r["prompt_len"],
                output_len=r["output_len"],
                arrival=r["arrival"],
                admitted=r["admitted"],
                first_token_time=r["first_token_time"],
                token_times=list(r["token_times"]),
                completion=r["completion"],
                prefill_tokens_done=r["prefill_tokens_done"],
                placements=[(t, p) for t, p in r["placements"]],
            )
            for r in doc["records"]
        ]
        return cls(
            records=records,
            ttft_attainment=doc["ttft_attainment"],
            tpot_attainment=doc["tpot_attainment"],
            be_prefill_tput=doc["be_prefill_tput"],
            be_decode_tput=doc["be_decode_tput"],
            ls_decode_tput=doc["ls_decode_tput"],
            ls_rejected=doc["ls_rejected"],
            tpot_p99=doc["tpot_p99"],
            counters=dict(doc["counters"]),
            config_echo=doc["config_echo"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        """Flat table: one row per request plus one aggregate row."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["row", "id", "cls", "prompt_len", "output_len", "arrival", "admitted",
             "ttft", "tokens", "completion"]
        )
        for r in self.records:
            writer.writerow(
                [
                    "request", r.id, r.cls.value, r.prompt_len, r.output_len,
                    r.arrival, int(r.admitted),
                    (r.first_token_time - r.arrival) if r.first_token_time is not None else "",
                    len(r.token_times),
                    r.completion if r.completion is not None else "",
                ]
            )
        writer.writerow(
            ["aggregate", "", "", "", "", "", "",
             f"ttft_att={self.ttft_attainment}", f"tpot_att={self.tpot_attainment}",
             f"be_tput={self.be_prefill_tput}/{self.be_decode_tput}"]
        )
        return buf.getvalue()


def build_report(
    records: list[RequestRecord],
    slo: SloConfig,
    horizon: float,
    counters: dict[str, int],
    config_echo: dict,
) -> SimReport:
    ttft_frac, tpot_frac = attainment(records, slo, horizon)
    be_pre, be_dec = be_throughput(records, horizon)
    return SimReport(
        records=records,
        ttft_attainment=ttft_frac,
        tpot_attainment=tpot_frac,
        be_prefill_tput=be_pre,
        be_decode_tput=be_dec,
        ls_decode_tput=ls_decode_throughput(records, horizon),
        ls_rejected=sum(1 for r in records if r.cls == ServiceClass.LS and not r.admitted),
        tpot_p99=_tpot_p99(records),
        counters=counters,
        config_echo=config_echo,
    )
