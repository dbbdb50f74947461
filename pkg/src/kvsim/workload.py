"""Benign traffic generation: Poisson clients, length presets, trace replay."""

import csv
import heapq
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rng

# Hourly conversation rates for the three representative traffic windows
# of a day (low ~01:00, medium ~20:00, high ~16:00).
PROFILE_RATES_PER_HOUR = {"low": 13.7, "medium": 47.9, "high": 115.1}


class WorkloadError(Exception):
    pass


class TraceParseError(WorkloadError):
    pass


class UnknownPreset(WorkloadError):
    pass


@dataclass
class LengthDist:
    """Truncated lognormal token-length sampler, parameterized by median."""
    prompt_median: float
    prompt_sigma: float
    output_median: float
    output_sigma: float

    def sample(self, gen: np.random.Generator, max_model_len: int) -> Tuple[int, int]:
        prompt = int(round(float(
            gen.lognormal(np.log(self.prompt_median), self.prompt_sigma))))
        output = int(round(float(
            gen.lognormal(np.log(self.output_median), self.output_sigma))))
        prompt = min(max(prompt, 1), max_model_len - 1)
        output = min(max(output, 1), max_model_len)
        # keep prompt + output within the model context window
        if prompt + output > max_model_len:
            output = max_model_len - prompt
        return prompt, output


# Synthetic stand-ins for the two contrastive public workload profiles:
# short-context instruction following vs long-context dialogue. Medians are
# calibration choices, not dataset measurements.
PRESETS = {
    "alpaca-like": LengthDist(prompt_median=50, prompt_sigma=0.6,
                              output_median=250, output_sigma=0.7),
    "sharegpt-like": LengthDist(prompt_median=300, prompt_sigma=0.8,
                                output_median=800, output_sigma=0.8),
}


def preset(name: str) -> LengthDist:
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown length preset {name!r}") from None


@dataclass
class WorkloadConfig:
    # "closed" keeps n_clients requests in flight, one per client, the way
    # concurrency-sweep load generators drive a serving endpoint
    arrival: str = "poisson"            # poisson | trace | profile | closed
    rate_per_s: float = 1.0             # per client (poisson)
    tier: str = "medium"                # profile mode
    trace_path: Optional[str] = None
    preset: str = "alpaca-like"
    n_clients: int = 1
    max_model_len: int = 8192

    def validate(self) -> None:
        if self.arrival not in ("poisson", "trace", "profile", "closed"):
            raise WorkloadError(f"unknown arrival kind {self.arrival!r}")
        if self.arrival == "poisson" and self.rate_per_s <= 0:
            raise WorkloadError("rate_per_s must be > 0")
        if self.arrival == "profile" and self.tier not in PROFILE_RATES_PER_HOUR:
            raise WorkloadError(f"unknown profile tier {self.tier!r}")
        if self.arrival == "trace" and not self.trace_path:
            raise WorkloadError("trace mode requires trace_path")
        if self.n_clients < 1:
            raise WorkloadError("n_clients must be >= 1")
        if self.arrival != "trace" and self.preset != "mixed":
            preset(self.preset)

    def client_rate_per_s(self) -> float:
        if self.arrival == "profile":
            return PROFILE_RATES_PER_HOUR[self.tier] / 3600.0
        return self.rate_per_s


@dataclass
class ArrivalSpec:
    """One request-to-be: timing and lengths, before the engine mints it."""
    t_us: int
    prompt_len: int
    output_len: int
    tenant: str = "benign"


class _ClientStream:
    """Single Poisson client with its own derived random stream."""

    def __init__(self, seed: int, index: int, rate_per_s: float,
                 lengths: LengthDist, max_model_len: int) -> None:
        self.gen = rng.stream(seed, f"workload.client{index}")
        self.rate = rate_per_s
        self.lengths = lengths
        self.max_model_len = max_model_len
        self.t_us = 0

    def next(self) -> ArrivalSpec:
        gap_s = float(self.gen.exponential(1.0 / self.rate))
        self.t_us += max(1, int(round(gap_s * 1e6)))
        prompt, output = self.lengths.sample(self.gen, self.max_model_len)
        return ArrivalSpec(self.t_us, prompt, output)


class WorkloadSource:
    """Merged, time-ordered arrival stream over all clients (or a trace).

    Closed-loop mode produces no timed stream; the engine drives it via
    sample_lengths() on each client's completion.
    """

    def __init__(self, config: WorkloadConfig, seed: int) -> None:
        config.validate()
        self.config = config
        self._trace: Optional[List[ArrivalSpec]] = None
        self._trace_pos = 0
        self._heap: List[Tuple[int, int, ArrivalSpec]] = []
        self._clients: List[_ClientStream] = []
        self._length_gens: List[np.random.Generator] = []
        if config.arrival == "closed":
            self._length_gens = [rng.stream(seed, f"workload.client{i}")
                                 for i in range(config.n_clients)]
        elif config.arrival == "trace":
            self._trace = load_trace(config.trace_path)
        else:
            rate = config.client_rate_per_s()
            for i in range(config.n_clients):
                client = _ClientStream(seed, i, rate, self._client_preset(i),
                                       config.max_model_len)
                self._clients.append(client)
                spec = client.next()
                heapq.heappush(self._heap, (spec.t_us, i, spec))

    @property
    def closed_loop(self) -> bool:
        return self.config.arrival == "closed"

    def _client_preset(self, client: int) -> LengthDist:
        if self.config.preset == "mixed":
            # alternate profiles across clients: short instruction traffic
            # next to heavy dialogue
            name = "alpaca-like" if client % 2 == 0 else "sharegpt-like"
            return preset(name)
        return preset(self.config.preset)

    def sample_lengths(self, client: int) -> Tuple[int, int]:
        return self._client_preset(client).sample(
            self._length_gens[client], self.config.max_model_len)

    def peek_t_us(self) -> Optional[int]:
        if self._trace is not None:
            if self._trace_pos >= len(self._trace):
                return None
            return self._trace[self._trace_pos].t_us
        if not self._heap:
            return None
        return self._heap[0][0]

    def pop(self) -> Optional[ArrivalSpec]:
        if self._trace is not None:
            if self._trace_pos >= len(self._trace):
                return None
            spec = self._trace[self._trace_pos]
            self._trace_pos += 1
            return spec
        if not self._heap:
            return None
        _, index, spec = heapq.heappop(self._heap)
        nxt = self._clients[index].next()
        heapq.heappush(self._heap, (nxt.t_us, index, nxt))
        return spec

    def take_until(self, t_us: int) -> List[ArrivalSpec]:
        out = []
        while True:
            head = self.peek_t_us()
            if head is None or head > t_us:
                return out
            out.append(self.pop())


def next_arrival(source: WorkloadSource) -> Optional[ArrivalSpec]:
    return source.pop()


TRACE_HEADER = ["t_us", "prompt_len", "output_len", "tenant"]


def load_trace(path: str) -> List[ArrivalSpec]:
    specs: List[ArrivalSpec] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise TraceParseError(
                f"{path}: expected header {','.join(TRACE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t_us, prompt, output = int(row[0]), int(row[1]), int(row[2])
                tenant = row[3]
            except (ValueError, IndexError) as exc:
                raise TraceParseError(f"{path}:{lineno}: bad row {row!r}") from exc
            if prompt < 1 or output < 0 or t_us < 0:
                raise TraceParseError(f"{path}:{lineno}: out-of-range values")
            specs.append(ArrivalSpec(t_us, prompt, output, tenant))
    specs.sort(key=lambda s: s.t_us)
    return specs


def export_trace(specs: Sequence[ArrivalSpec], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for spec in specs:
            writer.writerow([spec.t_us, spec.prompt_len, spec.output_len,
                             spec.tenant])
