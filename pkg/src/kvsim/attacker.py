"""Adversarial clients: tiered payloads, the closed-loop fill/squeeze
controller, fixed-interval baselines, and exact cost accounting.

Payloads are length specifications only; the monetary ledger runs on
integer cost units (1 unit = one cent per million tokens = 1e-8 USD per
token) so incremental totals equal a from-scratch recomputation exactly.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

COST_UNIT_USD = 1e-8  # one cent per million tokens, per token

TIER_HIGH = "high"
TIER_MID = "mid"
TIER_LOW = "low"

REGIME_FILL = "fill"
REGIME_BUFFER = "buffer"
REGIME_SQUEEZE = "squeeze"
REGIME_BACKOFF = "backoff"

ACTION_DISPATCH = "dispatch"
ACTION_SLEEP = "sleep"
ACTION_PROBE = "probe"


class AttackerError(Exception):
    pass


@dataclass
class PromptTier:
    tier: str
    input_range: Tuple[int, int]     # sampled uniformly, inclusive
    output_range: Tuple[int, int]

    def sample(self, gen: np.random.Generator) -> Tuple[int, int]:
        lo_i, hi_i = self.input_range
        lo_o, hi_o = self.output_range
        return (int(gen.integers(lo_i, hi_i + 1)),
                int(gen.integers(lo_o, hi_o + 1)))

    def expected_output_tokens(self) -> float:
        lo, hi = self.output_range
        return (lo + hi) / 2.0

    def expected_expansion_blocks(self, block_size_tokens: int) -> int:
        return math.ceil(self.expected_output_tokens() / block_size_tokens)


def default_tiers(max_model_len: int) -> Dict[str, PromptTier]:
    """Three intensity tiers keyed by realized output length: near-limit
    sequences for filling, 1k-2k buffers, and ~500-token squeezers.

    Fill and buffer prompts carry a few hundred input tokens so their
    blocks land at admission time; squeeze prompts stay minimal since they
    only need to tip a nearly full pool over the boundary.
    """
    return {
        TIER_HIGH: PromptTier(TIER_HIGH, (256, 768),
                              (int(0.8 * max_model_len), max_model_len)),
        TIER_MID: PromptTier(TIER_MID, (256, 768), (1000, 2000)),
        TIER_LOW: PromptTier(TIER_LOW, (20, 60), (400, 600)),
    }


# Length profiles standing in for published payload families; these are
# dispatch-time shapes, oblivious of scheduler state.
def baseline_pools(max_model_len: int) -> Dict[str, PromptTier]:
    return {
        "engorgio-like": PromptTier("engorgio-like", (30, 80),
                                    (800, 2200)),
        "loopllm-like": PromptTier("loopllm-like", (50, 150),
                                   (1000, 3000)),
        "extendattack-like": PromptTier("extendattack-like", (200, 600),
                                        (1200, 4000)),
        "high": PromptTier("high", (256, 768),
                           (int(0.8 * max_model_len), max_model_len)),
    }


@dataclass
class AttackerConfig:
    mode: str = "none"                  # none | controller | baseline | staircase
    estimator: str = "oracle"           # oracle | model
    model_path: Optional[str] = None
    c_sat: float = 0.975
    delta_margin: float = 0.02
    delta_large: float = 0.30
    delta_small: float = 0.05
    t_wait_us: int = 8000               # ~two expected iteration durations
    probe_period_us: int = 0            # min gap between probe dispatches
    concurrency_quota: int = 8
    price_in_cents_per_mtok: int = 15   # GPT-4o-mini-like rates
    price_out_cents_per_mtok: int = 60
    backoff_enabled: bool = True
    high_only: bool = False             # tier-blind comparator strategy
    start_us: int = 0
    fill_pace_us: int = 0               # min gap between fill dispatches
    baseline_period_us: int = 2_000_000
    baseline_pool: str = "engorgio-like"
    staircase_levels: int = 10
    staircase_hold_us: int = 4_000_000
    staircase_peak: float = 0.97

    def validate(self) -> None:
        if self.mode not in ("none", "controller", "baseline", "staircase"):
            raise AttackerError(f"unknown attacker mode {self.mode!r}")
        if self.estimator not in ("oracle", "model"):
            raise AttackerError(f"unknown estimator {self.estimator!r}")
        if not 0 < self.delta_small <= self.delta_large < 1:
            raise AttackerError("need 0 < delta_small <= delta_large < 1")
        if not 0.5 < self.c_sat <= 1.0:
            raise AttackerError("c_sat must be in (0.5, 1.0]")
        if self.concurrency_quota < 1:
            raise AttackerError("concurrency_quota must be >= 1")
        if self.price_in_cents_per_mtok < 0 or self.price_out_cents_per_mtok < 0:
            raise AttackerError("prices must be >= 0")
        if self.mode == "controller" and self.estimator == "model" \
                and not self.model_path:
            raise AttackerError("model estimator requires model_path")


@dataclass
class CostLedger:
    """Token and money accounting in exact integer cost units."""
    input_tokens: int = 0
    output_tokens: int = 0
    probe_input_tokens: int = 0
    probe_output_tokens: int = 0
    cost_units: int = 0

    def charge_input(self, tokens: int, rate_cents_per_mtok: int,
                     probe: bool = False) -> None:
        self.input_tokens += tokens
        if probe:
            self.probe_input_tokens += tokens
        self.cost_units += tokens * rate_cents_per_mtok

    def charge_output(self, tokens: int, rate_cents_per_mtok: int,
                      probe: bool = False) -> None:
        self.output_tokens += tokens
        if probe:
            self.probe_output_tokens += tokens
        self.cost_units += tokens * rate_cents_per_mtok

    @property
    def total_usd(self) -> float:
        return self.cost_units * COST_UNIT_USD

    def to_dict(self) -> Dict[str, float]:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "probe_input_tokens": self.probe_input_tokens,
            "probe_output_tokens": self.probe_output_tokens,
            "cost_units": self.cost_units,
            "total_usd": self.total_usd,
        }


@dataclass
class ControllerState:
    last_estimate: Optional[float] = None
    delta_mem: Optional[float] = None
    regime: Optional[str] = None
    ledger: CostLedger = field(default_factory=CostLedger)


@dataclass
class Action:
    kind: str                       # dispatch | sleep | probe
    tier: Optional[str] = None
    sleep_us: int = 0


def controller_step(config: AttackerConfig, state: ControllerState,
                    usage_estimate: float) -> Action:
    """One decision of the adaptive fill/squeeze loop.

    The estimated memory gap picks the regime: a large gap means the
    system is idle (fill with near-limit payloads); a vanishing positive
    gap means the saturation boundary is close (squeeze with small
    payloads); a non-positive gap means the system is overloaded (back
    off to avoid self-preemption). The band between the two thresholds
    dispatches mid-intensity buffers to keep pressure on.
    """
    delta = config.c_sat - usage_estimate
    state.last_estimate = usage_estimate
    state.delta_mem = delta
    if delta > config.delta_large:
        state.regime = REGIME_FILL
        return Action(ACTION_DISPATCH, tier=TIER_HIGH)
    if delta > config.delta_small:
        state.regime = REGIME_BUFFER
        return Action(ACTION_DISPATCH,
                      tier=TIER_HIGH if config.high_only else TIER_MID)
    if delta > 0:
        state.regime = REGIME_SQUEEZE
        return Action(ACTION_DISPATCH,
                      tier=TIER_HIGH if config.high_only else TIER_LOW)
    if config.backoff_enabled:
        state.regime = REGIME_BACKOFF
        return Action(ACTION_SLEEP, sleep_us=config.t_wait_us)
    state.regime = REGIME_SQUEEZE
    return Action(ACTION_DISPATCH,
                  tier=TIER_HIGH if config.high_only else TIER_LOW)


def expansion_ratio(request) -> float:
    if request.prompt_len < 1:
        raise AttackerError("prompt_len must be >= 1")
    return request.generated_len / request.prompt_len


# -- cost paradigms -----------------------------------------------------------


@dataclass
class PriceRates:
    input_cents_per_mtok: int = 15
    output_cents_per_mtok: int = 60
    electricity_usd_per_kwh: float = 0.08


@dataclass
class PlainText:
    h_in: int
    h_out: int


@dataclass
class BlackBox:
    iterations: List[Tuple[int, int]]   # (h_in, h_out) per query iteration


@dataclass
class WhiteBox:
    t_opt_s: float
    p_avg_w: float


def cost_units_of(paradigm, rates: PriceRates) -> int:
    """Exact integer cost of a token-metered paradigm."""
    if isinstance(paradigm, PlainText):
        if paradigm.h_in < 0 or paradigm.h_out < 0:
            raise AttackerError("token counts must be >= 0")
        return (paradigm.h_in * rates.input_cents_per_mtok
                + paradigm.h_out * rates.output_cents_per_mtok)
    if isinstance(paradigm, BlackBox):
        total = 0
        for h_in, h_out in paradigm.iterations:
            if h_in < 0 or h_out < 0:
                raise AttackerError("token counts must be >= 0")
            total += (h_in * rates.input_cents_per_mtok
                      + h_out * rates.output_cents_per_mtok)
        return total
    raise AttackerError(f"no fixed-point cost for {type(paradigm).__name__}")


def cost_of(paradigm, rates: PriceRates) -> float:
    """Monetary cost in USD of one attack paradigm."""
    if isinstance(paradigm, WhiteBox):
        if paradigm.t_opt_s < 0 or paradigm.p_avg_w < 0:
            raise AttackerError("white-box inputs must be >= 0")
        kwh = paradigm.t_opt_s * paradigm.p_avg_w / 3.6e6
        return kwh * rates.electricity_usd_per_kwh
    return cost_units_of(paradigm, rates) * COST_UNIT_USD
