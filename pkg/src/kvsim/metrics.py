"""Per-request and aggregate service metrics (TTFT, TPOT, ITL, E2E)."""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence


class MetricsError(Exception):
    pass


class EmptyInput(MetricsError):
    pass


class NotFinished(MetricsError):
    pass


class ZeroBaseline(MetricsError):
    pass


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: sorted value at index ceil(p/100 * n) - 1."""
    if not values:
        raise EmptyInput("percentile of empty list")
    if not 0 < p <= 100:
        raise MetricsError(f"p must be in (0, 100], got {p}")
    ordered = sorted(values)
    rank = -(-int(p * len(ordered)) // 100)  # ceil(p/100 * n) without floats
    return ordered[max(rank, 1) - 1]


@dataclass
class MetricsRecord:
    request_id: int
    tenant_class: str
    ttft_us: int
    tpot_us: Optional[float]   # undefined below 2 output tokens
    itl_p99_us: Optional[int]
    e2e_us: int
    n_output_tokens: int
    preempt_count: int


def finalize(request: Any, event_log: Any = None) -> MetricsRecord:
    """Compute per-request metrics for a finished request.

    The request object carries its own timing trace; event_log is accepted
    for recomputation-style cross-checks but not required.
    """
    if request.state.value != "finished":
        raise NotFinished(f"request {request.id} is {request.state.value}")
    ttft = request.first_token_us - request.arrival_us
    e2e = request.finish_us - request.arrival_us
    n = request.generated_len
    tpot = None
    if n >= 2:
        last_token_us = request.itl_trace[-1][0]
        tpot = (last_token_us - request.first_token_us) / (n - 1)
    itl_p99 = None
    if request.itl_trace:
        itl_p99 = percentile([gap for _, gap in request.itl_trace], 99)
    return MetricsRecord(
        request_id=request.id,
        tenant_class=request.tenant.value,
        ttft_us=ttft,
        tpot_us=tpot,
        itl_p99_us=itl_p99,
        e2e_us=e2e,
        n_output_tokens=n,
        preempt_count=request.preempt_count,
    )


@dataclass
class ClassAggregate:
    submitted: int = 0
    rejected: int = 0
    finished: int = 0
    starved: int = 0            # no first token by run end
    in_flight: int = 0          # first token emitted, unfinished at run end
    ttft_mean_us: Optional[float] = None
    ttft_median_us: Optional[float] = None
    ttft_p99_us: Optional[float] = None
    tpot_mean_us: Optional[float] = None
    tpot_median_us: Optional[float] = None
    tpot_p99_us: Optional[float] = None
    e2e_mean_us: Optional[float] = None
    itl_p99_us: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class AggregateReport:
    per_class: Dict[str, ClassAggregate]
    preemptions_total: int
    hol_blocked_steps: int
    kv_usage_histogram: List[int]       # 10 uniform bins over [0, 1]
    high_band_fraction: float           # time share with usage >= 0.975
    saturation_crossings: int
    attack_requests: int
    attacker_cost_usd: Optional[float]
    attacker_cost_units: Optional[int]
    n_steps: int
    horizon_us: int
    slowdown_vs_baseline: Optional[Dict[str, float]] = None

    def to_dict(self) -> Dict[str, Any]:
        doc = dict(self.__dict__)
        doc["per_class"] = {k: v.to_dict() for k, v in self.per_class.items()}
        return doc


def aggregate_class(records: List[MetricsRecord], submitted: int,
                    rejected: int, starved: int, in_flight: int,
                    ttft_partial_us: Optional[List[int]] = None) -> ClassAggregate:
    """Aggregate one tenant class.

    Unfinished requests that did emit a first token contribute their TTFT
    (ttft_partial_us); requests never scheduled stay in the starved tally.
    """
    agg = ClassAggregate(submitted=submitted, rejected=rejected,
                         finished=len(records), starved=starved,
                         in_flight=in_flight)
    ttfts: List[float] = [r.ttft_us for r in records]
    if ttft_partial_us:
        ttfts.extend(ttft_partial_us)
    tpots = [r.tpot_us for r in records if r.tpot_us is not None]
    itl99s = [r.itl_p99_us for r in records if r.itl_p99_us is not None]
    if ttfts:
        agg.ttft_mean_us = sum(ttfts) / len(ttfts)
        agg.ttft_median_us = percentile(ttfts, 50)
        agg.ttft_p99_us = percentile(ttfts, 99)
    if tpots:
        agg.tpot_mean_us = sum(tpots) / len(tpots)
        agg.tpot_median_us = percentile(tpots, 50)
        agg.tpot_p99_us = percentile(tpots, 99)
    if records:
        agg.e2e_mean_us = sum(r.e2e_us for r in records) / len(records)
    if itl99s:
        agg.itl_p99_us = percentile(itl99s, 99)
    return agg


def slowdown(report: AggregateReport, baseline: AggregateReport) -> Dict[str, float]:
    """Degradation factors of the benign class relative to a baseline run."""
    ours = report.per_class.get("benign")
    base = baseline.per_class.get("benign")
    if ours is None or base is None:
        raise MetricsError("both reports must cover the benign class")
    factors: Dict[str, float] = {}
    for key, attack_v, base_v in (
        ("ttft", ours.ttft_mean_us, base.ttft_mean_us),
        ("tpot", ours.tpot_mean_us, base.tpot_mean_us),
    ):
        if attack_v is None or base_v is None:
            continue
        if base_v == 0:
            raise ZeroBaseline(f"baseline {key} is zero")
        factors[key] = attack_v / base_v
    return factors


def usage_histogram(fractions: Sequence[float], n_bins: int = 10) -> List[int]:
    counts = [0] * n_bins
    for u in fractions:
        idx = min(int(u * n_bins), n_bins - 1)
        counts[idx] += 1
    return counts
