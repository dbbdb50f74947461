"""Iteration timing: bandwidth-bound decode, linear prefill, PCIe swap.

One scheduler step costs a shared duration built from the whole batch:
the decode term streams every running request's KV history from HBM, so
it scales with the *sum* of context lengths (global bandwidth contention);
prefill and the fixed floor are compute-bound and usage-independent.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np


@dataclass
class LatencyModelConfig:
    # Defaults sized to an L40S-like node; all knobs are calibration
    # choices, not measurements.
    kv_bytes_per_token: float = 131072.0
    bw_hbm: float = 864e9
    bw_pcie: float = 32e9
    prefill_us_per_token: float = 60.0
    decode_floor_us: float = 1500.0
    noise_stddev_frac: float = 0.05
    # absolute scheduling/launch jitter; load-independent, unlike the
    # multiplicative term, so short iterations stay genuinely noisy
    noise_floor_us: float = 0.0

    def validate(self) -> None:
        if self.kv_bytes_per_token <= 0 or self.bw_hbm <= 0 or self.bw_pcie <= 0:
            raise ValueError("latency rates must be > 0")
        if self.prefill_us_per_token < 0 or self.decode_floor_us < 0:
            raise ValueError("latency floors must be >= 0")
        if self.noise_stddev_frac < 0 or self.noise_floor_us < 0:
            raise ValueError("noise terms must be >= 0")


@dataclass
class BatchStats:
    total_ctx_tokens: int = 0
    prefill_tokens: int = 0
    swap_bytes: int = 0


class LatencyModel:
    def __init__(self, config: LatencyModelConfig,
                 noise_stream: Optional[np.random.Generator] = None) -> None:
        config.validate()
        self.config = config
        self._noise = noise_stream

    def iteration_duration(self, batch: BatchStats) -> int:
        """Duration of one iteration in integer microseconds (>= 1)."""
        cfg = self.config
        decode_us = batch.total_ctx_tokens * cfg.kv_bytes_per_token / cfg.bw_hbm * 1e6
        prefill_us = batch.prefill_tokens * cfg.prefill_us_per_token
        swap_us = batch.swap_bytes / cfg.bw_pcie * 1e6
        base = cfg.decode_floor_us + decode_us + prefill_us + swap_us
        factor = 1.0
        if cfg.noise_stddev_frac > 0 and self._noise is not None:
            factor = float(self._noise.normal(1.0, cfg.noise_stddev_frac))
            factor = min(max(factor, 0.5), 2.0)
        jitter = 0.0
        if cfg.noise_floor_us > 0 and self._noise is not None:
            jitter = float(self._noise.normal(0.0, cfg.noise_floor_us))
            jitter = max(jitter, -0.5 * base)
        return max(1, int(round(base * factor + jitter)))

    def itl_for_iteration(self, duration_us: int,
                          emitting_ids: Iterable[int]) -> Dict[int, int]:
        """Every request that emitted a token this iteration records the
        same gap: the batch-shared iteration duration."""
        return {rid: duration_us for rid in emitting_ids}

    def swap_bytes_for_blocks(self, blocks: int, block_size_tokens: int) -> int:
        return int(blocks * block_size_tokens * self.config.kv_bytes_per_token)
