"""Iteration-level scheduler: FCFS admission, chunked prefill, continuous
batching, LIFO preemption with swap or recompute recovery.

Admission walks the waiting queue head-first and stops at the first
request whose blocks cannot be allocated (memory-based head-of-line
blocking). When a decode step cannot claim a block, the most recently
scheduled running request is evicted and prepended to the waiting front.
"""

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

from . import events as ev
from .kv import BlockPool


class SchedulerError(Exception):
    pass


class DuplicateId(SchedulerError):
    pass


class QuotaExceeded(SchedulerError):
    pass


class Tenant(Enum):
    BENIGN = "benign"
    ATTACKER = "attacker"
    PROBE = "probe"


class State(Enum):
    WAITING = "waiting"
    RUNNING = "running"
    SWAPPED = "swapped"
    FINISHED = "finished"


class RecoveryMode(Enum):
    SWAP = "swap"
    RECOMPUTE = "recompute"


@dataclass
class Request:
    id: int
    tenant: Tenant
    arrival_us: int
    prompt_len: int
    target_output_len: int          # ground truth, hidden from the attacker
    generated_len: int = 0
    prefill_target: int = 0         # tokens to prefill on (re)admission
    prefill_progress: int = 0
    state: State = State.WAITING
    schedule_seq: int = -1
    first_token_us: Optional[int] = None
    finish_us: Optional[int] = None
    itl_trace: List[Tuple[int, int]] = field(default_factory=list)  # (t_us, gap_us)
    preempt_count: int = 0

    def __post_init__(self) -> None:
        if self.prefill_target == 0:
            self.prefill_target = self.prompt_len

    def context_tokens(self) -> int:
        """Tokens computed so far (KV the decode step must stream)."""
        return min(self.prefill_progress, self.prefill_target) + self.generated_len


@dataclass
class TenantQuota:
    max_outstanding_per_tenant: Optional[int] = None
    max_expansion_ratio: Optional[float] = None


@dataclass
class SchedulerConfig:
    token_budget_per_iter: int = 512
    recovery_mode: RecoveryMode = RecoveryMode.RECOMPUTE
    max_running: Optional[int] = None
    output_cap: Optional[int] = None
    tenant_quota: Optional[TenantQuota] = None

    def validate(self) -> None:
        if self.token_budget_per_iter < 1:
            raise SchedulerError("token_budget_per_iter must be >= 1")
        if self.output_cap is not None and self.output_cap < 1:
            raise SchedulerError("output_cap must be >= 1")


@dataclass
class StepPlan:
    """Composition of one iteration, applied by commit() once timed."""
    admitted: List[int] = field(default_factory=list)
    resumed: List[int] = field(default_factory=list)
    prefill_chunks: Dict[int, int] = field(default_factory=dict)
    decode_set: List[int] = field(default_factory=list)
    preempted: List[int] = field(default_factory=list)
    blocked_head: Optional[int] = None
    swap_in_blocks: int = 0
    swap_out_blocks: int = 0
    total_ctx_tokens: int = 0

    @property
    def is_idle(self) -> bool:
        return (not self.prefill_chunks and not self.decode_set
                and not self.resumed and self.swap_out_blocks == 0)

    def prefill_tokens(self) -> int:
        return sum(self.prefill_chunks.values())


class Scheduler:
    def __init__(self, config: SchedulerConfig, pool: BlockPool,
                 log: ev.EventLog) -> None:
        config.validate()
        self.config = config
        self.pool = pool
        self.log = log
        self.requests: Dict[int, Request] = {}
        self.waiting: Deque[int] = deque()
        self.running: List[int] = []        # ascending schedule_seq
        self._next_seq = 0
        self.preemptions_total = 0
        self.hol_blocked_steps = 0
        self._outstanding: Dict[Tenant, int] = {t: 0 for t in Tenant}
        # per-tenant finished token totals, for the expansion-ratio quota
        self._finished_prompt_tokens: Dict[Tenant, int] = {t: 0 for t in Tenant}
        self._finished_output_tokens: Dict[Tenant, int] = {t: 0 for t in Tenant}

    # -- submission ---------------------------------------------------------

    def submit(self, request: Request, now: int) -> None:
        if request.id in self.requests:
            raise DuplicateId(f"request {request.id} already submitted")
        if request.state is not State.WAITING:
            raise SchedulerError("submit requires a WAITING request")
        quota = self.config.tenant_quota
        if quota is not None:
            if (quota.max_outstanding_per_tenant is not None
                    and self._outstanding[request.tenant]
                    >= quota.max_outstanding_per_tenant):
                raise QuotaExceeded(
                    f"tenant {request.tenant.value} at outstanding limit")
            if (quota.max_expansion_ratio is not None
                    and self._finished_prompt_tokens[request.tenant] > 0):
                ratio = (self._finished_output_tokens[request.tenant]
                         / self._finished_prompt_tokens[request.tenant])
                if ratio > quota.max_expansion_ratio:
                    raise QuotaExceeded(
                        f"tenant {request.tenant.value} exceeds expansion "
                        f"ratio {quota.max_expansion_ratio}")
        self.requests[request.id] = request
        self.waiting.append(request.id)
        self._outstanding[request.tenant] += 1
        self.log.append(now, ev.ARRIVAL, request.id,
                        tenant=request.tenant.value,
                        prompt_len=request.prompt_len)

    # -- one scheduling pass --------------------------------------------------

    def plan(self, now: int) -> StepPlan:
        plan = StepPlan()
        budget = self.config.token_budget_per_iter

        # (1) FCFS admission; stop entirely at the first allocation failure.
        # New admissions are bounded by the prefill budget left after the
        # already-running requests' pending prefill work is accounted for.
        admission_budget = budget - sum(
            self.requests[rid].prefill_target
            - self.requests[rid].prefill_progress
            for rid in self.running)
        while self.waiting:
            head_id = self.waiting[0]
            head = self.requests[head_id]
            if (self.config.max_running is not None
                    and len(self.running) >= self.config.max_running):
                break
            if head.state is State.SWAPPED:
                if not self.pool.can_swap_in(head_id):
                    plan.blocked_head = head_id
                    self.hol_blocked_steps += 1
                    break
                blocks = self.pool.swap_in(head_id)
                plan.swap_in_blocks += blocks
                self.waiting.popleft()
                self._admit(head, now, plan, resumed=True)
            else:
                if admission_budget <= 0:
                    break
                if not self.pool.can_allocate(head.prefill_target):
                    plan.blocked_head = head_id
                    self.hol_blocked_steps += 1
                    break
                self.pool.allocate(head_id, head.prefill_target)
                self.waiting.popleft()
                was_preempted = head.preempt_count > 0
                self._admit(head, now, plan, resumed=was_preempted)
                plan.admitted.append(head_id)
                admission_budget -= head.prefill_target - head.prefill_progress

        # (2) Chunked prefill, head-first among running requests.
        for rid in self.running:
            if budget <= 0:
                break
            req = self.requests[rid]
            remaining = req.prefill_target - req.prefill_progress
            if remaining > 0:
                chunk = min(budget, remaining)
                plan.prefill_chunks[rid] = chunk
                budget -= chunk

        # (3)+(4) Decode with LIFO preemption; decode is budget-exempt.
        for rid in list(self.running):
            if rid not in self.requests or self.requests[rid].state is not State.RUNNING:
                continue
            req = self.requests[rid]
            after_chunk = req.prefill_progress + plan.prefill_chunks.get(rid, 0)
            if after_chunk < req.prefill_target:
                continue
            while True:
                result = self.pool.append_token(rid)
                if result.granted:
                    plan.decode_set.append(rid)
                    break
                victim_id = self.running[-1]
                self._preempt(victim_id, now, plan)
                if victim_id == rid:
                    break  # self-preempted; no token this step

        plan.total_ctx_tokens = sum(
            self.requests[rid].prefill_progress
            + plan.prefill_chunks.get(rid, 0)
            + self.requests[rid].generated_len
            for rid in self.running)
        return plan

    def _admit(self, req: Request, now: int, plan: StepPlan,
               resumed: bool) -> None:
        req.state = State.RUNNING
        req.schedule_seq = self._next_seq
        self._next_seq += 1
        self.running.append(req.id)
        self.log.append(now, ev.ADMISSION, req.id, seq=req.schedule_seq)
        if resumed:
            plan.resumed.append(req.id)
            self.log.append(now, ev.RESUME, req.id,
                            mode=self.config.recovery_mode.value)

    def _preempt(self, victim_id: int, now: int, plan: StepPlan) -> None:
        victim = self.requests[victim_id]
        max_seq = max(self.requests[r].schedule_seq for r in self.running)
        assert victim.schedule_seq == max_seq, "LIFO selection broken"
        self.running.remove(victim_id)
        plan.prefill_chunks.pop(victim_id, None)
        if victim_id in plan.decode_set:
            plan.decode_set.remove(victim_id)
        if victim_id in plan.admitted:
            plan.admitted.remove(victim_id)
        victim.preempt_count += 1
        mode = self.config.recovery_mode
        blocks = self._apply_recovery(victim, mode)
        if mode is RecoveryMode.SWAP:
            plan.swap_out_blocks += blocks
        plan.preempted.append(victim_id)
        self.waiting.appendleft(victim_id)
        self.preemptions_total += 1
        self.log.append(now, ev.PREEMPTION, victim_id,
                        victim_seq=victim.schedule_seq,
                        max_running_seq=max_seq,
                        mode=mode.value,
                        blocks=blocks,
                        waiting_head_after=self.waiting[0],
                        tenant=victim.tenant.value)

    def _apply_recovery(self, victim: Request, mode: RecoveryMode) -> int:
        if mode is RecoveryMode.SWAP:
            blocks = self.pool.swap_out(victim.id)
            victim.state = State.SWAPPED
        else:
            blocks = self.pool.free(victim.id)
            # the engine must re-process the prompt plus everything already
            # generated; the emitted tokens themselves are kept
            victim.prefill_target = victim.prompt_len + victim.generated_len
            victim.prefill_progress = 0
            victim.state = State.WAITING
        return blocks

    def apply_recovery(self, victim: Request, mode: RecoveryMode) -> int:
        """Public recovery hook; returns blocks moved or freed."""
        return self._apply_recovery(victim, mode)

    # -- applying a timed iteration -------------------------------------------

    def commit(self, plan: StepPlan, t_end: int, duration_us: int) -> List[int]:
        """Apply the planned iteration at its computed end time.

        Returns ids of requests that finished this step.
        """
        for rid, chunk in plan.prefill_chunks.items():
            self.requests[rid].prefill_progress += chunk
        finished: List[int] = []
        for rid in plan.decode_set:
            req = self.requests[rid]
            req.generated_len += 1
            if req.first_token_us is None:
                req.first_token_us = t_end
            req.itl_trace.append((t_end, duration_us))
            self.log.append(t_end, ev.TOKEN_EMITTED, rid, gap_us=duration_us)
            if req.generated_len >= self.effective_target(req):
                self._finish(req, t_end)
                finished.append(rid)
        return finished

    def effective_target(self, req: Request) -> int:
        if self.config.output_cap is not None:
            return min(req.target_output_len, self.config.output_cap)
        return req.target_output_len

    def _finish(self, req: Request, t_end: int) -> None:
        self.pool.free(req.id)
        self.running.remove(req.id)
        req.state = State.FINISHED
        req.finish_us = t_end
        self._outstanding[req.tenant] -= 1
        self._finished_prompt_tokens[req.tenant] += req.prompt_len
        self._finished_output_tokens[req.tenant] += req.generated_len
        self.log.append(t_end, ev.FINISH, req.id,
                        generated_len=req.generated_len)

    # -- observation ----------------------------------------------------------

    def queue_depths(self) -> Dict[str, int]:
        return {"waiting": len(self.waiting), "running": len(self.running)}

    def outstanding(self, tenant: Tenant) -> int:
        return self._outstanding[tenant]
