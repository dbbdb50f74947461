"""Simulation clock, event loop, and run orchestration.

Scheduler steps are the only time-advancing events: each loop turn pulls
queued arrivals, lets the attacker act, plans one scheduler iteration,
prices it through the latency model, and commits token emissions at the
computed end time. Arrivals between steps become visible at the next
step boundary.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from . import attacker as atk
from . import events as ev
from . import metrics as mt
from . import probe as pb
from . import rng
from .kv import BlockPool
from .latency import BatchStats, LatencyModel, LatencyModelConfig
from .scheduler import (QuotaExceeded, Request, Scheduler, SchedulerConfig,
                        State, Tenant)
from .workload import ArrivalSpec, WorkloadConfig, WorkloadSource


class ConfigError(Exception):
    pass


@dataclass
class SimClock:
    now: int = 0
    iteration_index: int = 0


@dataclass
class KvConfig:
    total_blocks: int = 2000
    block_size_tokens: int = 16
    watermark_blocks: int = 0

    def validate(self) -> None:
        if self.total_blocks < 1 or self.block_size_tokens < 1:
            raise ConfigError("kv: block counts must be >= 1")
        if self.watermark_blocks < 0:
            raise ConfigError("kv: watermark_blocks must be >= 0")


@dataclass
class ProbeSimConfig:
    min_window: int = pb.DEFAULT_MIN_WINDOW
    n_bins: int = 10
    labeling: bool = False

    def validate(self) -> None:
        if self.min_window < 2:
            raise ConfigError("probe: min_window must be >= 2")
        if self.n_bins < 2:
            raise ConfigError("probe: n_bins must be >= 2")


@dataclass
class SimConfig:
    seed: int = 0
    horizon_us: int = 10_000_000
    idle_tick_us: int = 100
    max_model_len: int = 8192
    kv: KvConfig = field(default_factory=KvConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    latency: LatencyModelConfig = field(default_factory=LatencyModelConfig)
    workload: Optional[WorkloadConfig] = field(default_factory=WorkloadConfig)
    attacker: atk.AttackerConfig = field(default_factory=atk.AttackerConfig)
    probe: ProbeSimConfig = field(default_factory=ProbeSimConfig)

    def validate(self) -> None:
        if self.horizon_us <= 0:
            raise ConfigError("horizon_us must be > 0")
        if self.idle_tick_us < 1:
            raise ConfigError("idle_tick_us must be >= 1")
        if self.max_model_len < 1:
            raise ConfigError("max_model_len must be >= 1")
        self.kv.validate()
        self.probe.validate()
        try:
            self.scheduler.validate()
            self.latency.validate()
            self.attacker.validate()
            if self.workload is not None:
                self.workload.validate()
        except Exception as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class StepRow:
    t_us: int                  # end-of-step time
    duration_us: int
    usage: float
    waiting: int
    running: int
    emitted: int
    prefill_tokens: int
    ctx_tokens: int
    idle: bool = False
    cost_units: int = 0        # cumulative attacker spend at step end


class _ProbeCollector:
    """Turns probe-request ITL gaps into feature windows.

    Windows come only from the attacker's own probe-class requests; the
    labeling path attaches ground-truth usage at the window midpoint for
    estimator training.
    """

    def __init__(self, config: ProbeSimConfig, model: Optional[pb.ProbeModel],
                 on_estimate) -> None:
        self.config = config
        self.model = model
        self.on_estimate = on_estimate
        self.samples: List[pb.LabeledSample] = []
        self._buffers: Dict[int, List] = {}
        self.windows_seen = 0

    def note_gap(self, request: Request, t_end: int, gap_us: int,
                 usage_now: float) -> None:
        if request.tenant is not Tenant.PROBE:
            return
        buf = self._buffers.setdefault(request.id, [])
        buf.append((gap_us, usage_now))
        if len(buf) < self.config.min_window:
            return
        gaps = [g for g, _ in buf]
        mid_usage = buf[len(buf) // 2][1]
        window = pb.ItlWindow(gaps_us=gaps, request_id=request.id,
                              t_end_us=t_end)
        self._buffers[request.id] = []
        self.windows_seen += 1
        if self.config.labeling:
            features = pb.extract_features(window, self.config.min_window)
            true_bin = pb.usage_to_bin(mid_usage, self.config.n_bins)
            self.samples.append(pb.LabeledSample(features, true_bin))
        if self.model is not None:
            pred = pb.predict(self.model, window)
            self.on_estimate(pred.usage_estimate, t_end)


class _AttackerDriver:
    """Engine-side orchestration of one adversarial tenant."""

    def __init__(self, config: atk.AttackerConfig, sim: "Simulation") -> None:
        self.config = config
        self.sim = sim
        self.gen = rng.stream(sim.config.seed, "attacker")
        self.tiers = atk.default_tiers(sim.config.max_model_len)
        self.pools = atk.baseline_pools(sim.config.max_model_len)
        self.state = atk.ControllerState()
        self.wake_at_us = 0
        self.next_baseline_us = config.start_us
        self.last_fill_us: Optional[int] = None
        self.last_probe_us: Optional[int] = None
        self.active_probe: Optional[int] = None
        self.outstanding_ids: Dict[int, str] = {}   # id -> tier name
        self.model_estimate: Optional[float] = None

    # attacker-visible expansion still expected from its in-flight requests
    def _pending_expansion_fraction(self) -> float:
        pending_blocks = 0
        bs = self.sim.config.kv.block_size_tokens
        for rid, tier_name in self.outstanding_ids.items():
            req = self.sim.scheduler.requests[rid]
            if req.state is State.FINISHED:
                continue
            tier = self.tiers.get(tier_name)
            if tier is None:
                continue
            remaining = tier.expected_output_tokens() - req.generated_len
            if remaining > 0:
                pending_blocks += -(-int(remaining) // bs)
        return pending_blocks / self.sim.config.kv.total_blocks

    def _uses_probe_requests(self) -> bool:
        if self.config.mode == "staircase":
            return True
        return self.config.mode == "controller" and self.config.estimator == "model"

    def on_estimate(self, estimate: float, t_us: int) -> None:
        self.model_estimate = estimate

    def _estimate(self, usage: float) -> Optional[float]:
        if self.config.estimator == "oracle":
            return usage
        return self.model_estimate

    def _maintain_probe(self, now: int) -> None:
        if not self._uses_probe_requests():
            return
        if self.active_probe is not None:
            req = self.sim.scheduler.requests[self.active_probe]
            if req.state is not State.FINISHED:
                return
            self.active_probe = None
        if (self.last_probe_us is not None
                and now < self.last_probe_us + self.config.probe_period_us):
            return
        prompt, output = self.tiers[atk.TIER_LOW].sample(self.gen)
        output = max(1, min(output, self.sim.config.max_model_len - prompt))
        rid = self.sim.submit_adversarial(now, Tenant.PROBE, prompt, output)
        if rid is None:
            return
        self.active_probe = rid
        self.last_probe_us = now
        self.sim.ledger.charge_input(prompt, self.config.price_in_cents_per_mtok,
                                     probe=True)
        self.sim.log.append(now, ev.PROBE_DISPATCHED, rid, prompt_len=prompt)

    def _dispatch(self, now: int, tier: atk.PromptTier, regime: Optional[str],
                  delta: Optional[float]) -> Optional[int]:
        prompt, output = tier.sample(self.gen)
        output = max(1, min(output, self.sim.config.max_model_len - prompt))
        rid = self.sim.submit_adversarial(now, Tenant.ATTACKER, prompt, output)
        if rid is None:
            return None
        self.outstanding_ids[rid] = tier.tier
        self.sim.ledger.charge_input(prompt, self.config.price_in_cents_per_mtok)
        detail: Dict[str, Any] = {"tier": tier.tier, "prompt_len": prompt}
        if regime is not None:
            detail["regime"] = regime
        if delta is not None:
            detail["delta_mem"] = delta
        self.sim.log.append(now, ev.ATTACK_DISPATCHED, rid, **detail)
        return rid

    def _outstanding_attack(self) -> int:
        count = 0
        for rid in self.outstanding_ids:
            if self.sim.scheduler.requests[rid].state is not State.FINISHED:
                count += 1
        return count

    def on_step_start(self, now: int, usage: float) -> None:
        if self.config.mode == "none" or now < self.config.start_us:
            return
        self._maintain_probe(now)
        if self.config.mode == "baseline":
            while self.next_baseline_us <= now:
                pool = self.pools[self.config.baseline_pool]
                self._dispatch(now, pool, None, None)
                self.next_baseline_us += self.config.baseline_period_us
            return
        if self.config.mode == "staircase":
            self._staircase(now, usage)
            return
        # controller
        estimate = self._estimate(usage)
        if estimate is None:
            return                      # no probe window completed yet
        if now < self.wake_at_us:
            return
        quota_free = (self._outstanding_attack()
                      < self.config.concurrency_quota)
        # restock: keep estimated load plus expected in-flight expansion
        # above the saturation line, replacing fill payloads before they
        # run out; this is the constraint the squeeze decisions assume
        projected = estimate + self._pending_expansion_fraction()
        if projected < self.config.c_sat + self.config.delta_margin:
            if quota_free and not (
                    self.last_fill_us is not None
                    and now < self.last_fill_us + self.config.fill_pace_us):
                self.last_fill_us = now
                atk.controller_step(self.config, self.state, estimate)
                regime = (atk.REGIME_FILL
                          if self.state.regime == atk.REGIME_FILL
                          else "restock")
                self._dispatch(now, self.tiers[atk.TIER_HIGH], regime,
                               self.state.delta_mem)
                return
        action = atk.controller_step(self.config, self.state, estimate)
        if action.kind == atk.ACTION_SLEEP:
            self.wake_at_us = now + action.sleep_us
            self.sim.log.append(now, ev.ATTACK_SLEEP, None,
                                reason="backoff",
                                delta_mem=self.state.delta_mem)
            return
        if not quota_free:
            return                      # quota exhausted: implicit hold
        if self.state.regime == atk.REGIME_FILL:
            return                      # fill already satisfied by restock
        self._dispatch(now, self.tiers[action.tier], self.state.regime,
                       self.state.delta_mem)

    def _staircase(self, now: int, usage: float) -> None:
        cfg = self.config
        level = min(cfg.staircase_levels - 1, now // cfg.staircase_hold_us)
        # level 0 holds the empty pool so probe windows cover the bottom bin
        target = cfg.staircase_peak * level / max(cfg.staircase_levels - 1, 1)
        if usage >= target - 0.01:
            return
        gap_tokens = int((target - usage) * self.sim.config.kv.total_blocks
                         * self.sim.config.kv.block_size_tokens)
        # small, short-lived fillers: the level is held by churn, so the
        # pool sits at the target instead of drifting through the bins
        prompt = min(max(gap_tokens, 32), 512)
        output = 512
        # only dispatch fillers the pool can admit right away, so the
        # calibration probe never queues behind a blocked filler
        pool = self.sim.pool
        if pool.free_blocks < pool.blocks_for(prompt) + 8:
            return
        rid = self.sim.submit_adversarial(now, Tenant.ATTACKER, prompt, output)
        if rid is not None:
            self.sim.ledger.charge_input(prompt, cfg.price_in_cents_per_mtok)
            self.sim.log.append(now, ev.ATTACK_DISPATCHED, rid,
                                tier="staircase", prompt_len=prompt,
                                level=int(level))

    def note_output_token(self, request: Request) -> None:
        if request.tenant is Tenant.ATTACKER:
            self.sim.ledger.charge_output(1, self.config.price_out_cents_per_mtok)
        elif request.tenant is Tenant.PROBE:
            self.sim.ledger.charge_output(1, self.config.price_out_cents_per_mtok,
                                          probe=True)


@dataclass
class RunReport:
    aggregate: mt.AggregateReport
    ledger: atk.CostLedger
    clock: SimClock
    steps: List[StepRow]
    requests: Dict[int, Request]
    log: ev.EventLog
    probe_samples: List[pb.LabeledSample]
    config: SimConfig

    def to_json(self) -> str:
        doc = {
            "aggregate": self.aggregate.to_dict(),
            "ledger": self.ledger.to_dict(),
            "iterations": self.clock.iteration_index,
            "final_t_us": self.clock.now,
            "event_log": "events.jsonl",
        }
        return json.dumps(doc, indent=2, sort_keys=True)


class Simulation:
    def __init__(self, config: SimConfig) -> None:
        config.validate()
        self.config = config
        self.clock = SimClock()
        self.log = ev.EventLog()
        self.pool = BlockPool(config.kv.total_blocks,
                              config.kv.block_size_tokens,
                              config.kv.watermark_blocks)
        self.scheduler = Scheduler(config.scheduler, self.pool, self.log)
        self.latency = LatencyModel(config.latency,
                                    rng.stream(config.seed, "latency.noise"))
        self.workload: Optional[WorkloadSource] = None
        if config.workload is not None:
            self.workload = WorkloadSource(config.workload, config.seed)
        self.ledger = atk.CostLedger()
        model = None
        if (config.attacker.mode == "controller"
                and config.attacker.estimator == "model"):
            model = pb.ProbeModel.load(config.attacker.model_path)
        self.driver = _AttackerDriver(config.attacker, self)
        self.collector = _ProbeCollector(config.probe, model,
                                         self.driver.on_estimate)
        self.steps: List[StepRow] = []
        self.rejected: Dict[Tenant, int] = {t: 0 for t in Tenant}
        self._next_id = 0
        self._last_sampled_usage = self.pool.used_fraction()
        self._closed_idle: List[int] = []
        self._closed_owner: Dict[int, int] = {}    # request id -> client
        if self.workload is not None and self.workload.closed_loop:
            self._closed_idle = list(range(config.workload.n_clients))

    # -- submission helpers ---------------------------------------------------

    def _mint_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    def submit_benign(self, spec: ArrivalSpec, now: int) -> Optional[int]:
        tenant = Tenant(spec.tenant) if spec.tenant else Tenant.BENIGN
        req = Request(id=self._mint_id(), tenant=tenant,
                      arrival_us=spec.t_us, prompt_len=spec.prompt_len,
                      target_output_len=max(1, spec.output_len))
        try:
            self.scheduler.submit(req, now)
        except QuotaExceeded:
            self.rejected[tenant] += 1
            return None
        return req.id

    def submit_adversarial(self, now: int, tenant: Tenant, prompt_len: int,
                           output_len: int) -> Optional[int]:
        req = Request(id=self._mint_id(), tenant=tenant, arrival_us=now,
                      prompt_len=prompt_len,
                      target_output_len=max(1, output_len))
        try:
            self.scheduler.submit(req, now)
        except QuotaExceeded:
            self.rejected[tenant] += 1
            return None
        return req.id

    # -- main loop ------------------------------------------------------------

    def _sources_drained(self) -> bool:
        if self.config.attacker.mode != "none":
            return False
        if self.workload is not None:
            if self.workload.closed_loop:
                return False
            if self.workload.peek_t_us() is not None:
                return False
        depths = self.scheduler.queue_depths()
        return depths["waiting"] == 0 and depths["running"] == 0

    def _sample_usage(self, t_us: int, force: bool) -> None:
        usage = self.pool.used_fraction()
        if force or usage != self._last_sampled_usage:
            self.log.append(t_us, ev.KV_SAMPLE, None, used_fraction=usage)
            self._last_sampled_usage = usage

    def step_once(self) -> StepRow:
        now = self.clock.now
        if self.workload is not None:
            if self.workload.closed_loop:
                for client in self._closed_idle:
                    prompt, output = self.workload.sample_lengths(client)
                    rid = self.submit_benign(
                        ArrivalSpec(now, prompt, output), now)
                    if rid is not None:
                        self._closed_owner[rid] = client
                self._closed_idle = []
            else:
                for spec in self.workload.take_until(now):
                    self.submit_benign(spec, now)
        self.driver.on_step_start(now, self.pool.used_fraction())

        plan = self.scheduler.plan(now)
        if plan.is_idle:
            t_end = now + self.config.idle_tick_us
            self.clock.now = t_end
            self.clock.iteration_index += 1
            self._sample_usage(t_end, force=False)
            row = StepRow(t_us=t_end, duration_us=self.config.idle_tick_us,
                          usage=self.pool.used_fraction(),
                          waiting=len(self.scheduler.waiting),
                          running=len(self.scheduler.running),
                          emitted=0, prefill_tokens=0, ctx_tokens=0, idle=True,
                          cost_units=self.ledger.cost_units)
            self.steps.append(row)
            return row

        swap_blocks = plan.swap_in_blocks + plan.swap_out_blocks
        batch = BatchStats(
            total_ctx_tokens=plan.total_ctx_tokens,
            prefill_tokens=plan.prefill_tokens(),
            swap_bytes=self.latency.swap_bytes_for_blocks(
                swap_blocks, self.config.kv.block_size_tokens),
        )
        duration = self.latency.iteration_duration(batch)
        t_end = now + duration
        emitted = list(plan.decode_set)
        finished = self.scheduler.commit(plan, t_end, duration)
        for rid in finished:
            client = self._closed_owner.pop(rid, None)
            if client is not None:
                self._closed_idle.append(client)
        usage_after = self.pool.used_fraction()
        for rid in emitted:
            req = self.scheduler.requests[rid]
            self.driver.note_output_token(req)
            self.collector.note_gap(req, t_end, duration, usage_after)
        self.clock.now = t_end
        self.clock.iteration_index += 1
        self._sample_usage(t_end, force=True)
        row = StepRow(t_us=t_end, duration_us=duration, usage=usage_after,
                      waiting=len(self.scheduler.waiting),
                      running=len(self.scheduler.running),
                      emitted=len(emitted),
                      prefill_tokens=batch.prefill_tokens,
                      ctx_tokens=batch.total_ctx_tokens,
                      cost_units=self.ledger.cost_units)
        self.steps.append(row)
        return row

    def run(self) -> RunReport:
        while self.clock.now < self.config.horizon_us:
            if self._sources_drained():
                break
            self.step_once()
        return self._build_report()

    # -- reporting ------------------------------------------------------------

    def _build_report(self) -> RunReport:
        per_class: Dict[str, mt.ClassAggregate] = {}
        for tenant in Tenant:
            records: List[mt.MetricsRecord] = []
            ttft_partial: List[int] = []
            submitted = starved = in_flight = 0
            for req in self.scheduler.requests.values():
                if req.tenant is not tenant:
                    continue
                submitted += 1
                if req.state is State.FINISHED:
                    records.append(mt.finalize(req))
                elif req.first_token_us is None:
                    starved += 1
                else:
                    in_flight += 1
                    ttft_partial.append(req.first_token_us - req.arrival_us)
            per_class[tenant.value] = mt.aggregate_class(
                records, submitted, self.rejected[tenant], starved,
                in_flight, ttft_partial)

        usages = [row.usage for row in self.steps]
        c_sat = self.config.attacker.c_sat
        crossings = 0
        for prev, cur in zip(usages, usages[1:]):
            if prev < c_sat <= cur:
                crossings += 1
        total_time = sum(row.duration_us for row in self.steps)
        high_time = sum(row.duration_us for row in self.steps
                        if row.usage >= 0.975)
        attack_requests = sum(
            1 for r in self.scheduler.requests.values()
            if r.tenant in (Tenant.ATTACKER, Tenant.PROBE))
        has_attacker = self.config.attacker.mode != "none"
        aggregate = mt.AggregateReport(
            per_class=per_class,
            preemptions_total=self.scheduler.preemptions_total,
            hol_blocked_steps=self.scheduler.hol_blocked_steps,
            kv_usage_histogram=mt.usage_histogram(usages),
            high_band_fraction=high_time / total_time if total_time else 0.0,
            saturation_crossings=crossings,
            attack_requests=attack_requests,
            attacker_cost_usd=self.ledger.total_usd if has_attacker else None,
            attacker_cost_units=self.ledger.cost_units if has_attacker else None,
            n_steps=self.clock.iteration_index,
            horizon_us=self.config.horizon_us,
        )
        return RunReport(aggregate=aggregate, ledger=self.ledger,
                         clock=self.clock, steps=self.steps,
                         requests=self.scheduler.requests, log=self.log,
                         probe_samples=self.collector.samples,
                         config=self.config)


def run(config: SimConfig) -> RunReport:
    return Simulation(config).run()


# -- file outputs ---------------------------------------------------------------


def _write_series(path: str, rows: List[StepRow], value_fn) -> None:
    with open(path, "w") as fh:
        fh.write("t_us,value\n")
        for row in rows:
            fh.write(f"{row.t_us},{value_fn(row)}\n")


def write_run_outputs(report: RunReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    report.log.write_jsonl(os.path.join(out_dir, "events.jsonl"))
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    _write_series(os.path.join(out_dir, "kv_usage.csv"), report.steps,
                  lambda r: repr(r.usage))
    _write_series(os.path.join(out_dir, "queue_waiting.csv"), report.steps,
                  lambda r: r.waiting)
    _write_series(os.path.join(out_dir, "queue_running.csv"), report.steps,
                  lambda r: r.running)
    itl_rows = [r for r in report.steps if r.emitted > 0]
    _write_series(os.path.join(out_dir, "itl.csv"), itl_rows,
                  lambda r: r.duration_us)
    if report.config.probe.labeling:
        pb.write_samples_csv(report.probe_samples,
                             os.path.join(out_dir, "probe_windows.csv"))
