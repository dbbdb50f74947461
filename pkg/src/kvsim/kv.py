"""Paged KV-cache accounting: block allocation, growth, freeing, swap.

All bookkeeping is in whole blocks drawn from one global free pool; a
request's allocation always covers ceil(context_tokens / block_size)
blocks. Swapped-out requests hold host-side copies and zero device blocks.
"""

from dataclasses import dataclass
from typing import Dict


class KvError(Exception):
    pass


class InsufficientBlocks(KvError):
    pass


class UnknownRequest(KvError):
    pass


@dataclass
class KvUsageSample:
    t_us: int
    used_fraction: float


@dataclass
class AppendResult:
    needs_block: bool
    granted: bool

    @property
    def ok(self) -> bool:
        return self.granted


class BlockPool:
    """Global paged KV-cache: free-list accounting plus per-request maps."""

    def __init__(self, total_blocks: int, block_size_tokens: int = 16,
                 watermark_blocks: int = 0) -> None:
        if total_blocks < 1 or block_size_tokens < 1 or watermark_blocks < 0:
            raise KvError("invalid block pool parameters")
        self.total_blocks = total_blocks
        self.block_size_tokens = block_size_tokens
        self.watermark_blocks = watermark_blocks
        self.free_blocks = total_blocks
        self.allocations: Dict[int, int] = {}   # request id -> device blocks
        self.swapped: Dict[int, int] = {}       # request id -> host blocks
        self._tokens: Dict[int, int] = {}       # request id -> context tokens

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_size_tokens)

    def can_allocate(self, prompt_tokens: int) -> bool:
        if prompt_tokens < 1:
            raise KvError("prompt_tokens must be >= 1")
        needed = self.blocks_for(prompt_tokens) + self.watermark_blocks
        return self.free_blocks >= needed

    def allocate(self, request_id: int, prompt_tokens: int) -> int:
        if request_id in self.allocations or request_id in self.swapped:
            raise KvError(f"request {request_id} already holds blocks")
        if not self.can_allocate(prompt_tokens):
            raise InsufficientBlocks(
                f"need {self.blocks_for(prompt_tokens)} blocks, "
                f"free {self.free_blocks}")
        blocks = self.blocks_for(prompt_tokens)
        self.allocations[request_id] = blocks
        self._tokens[request_id] = prompt_tokens
        self.free_blocks -= blocks
        return blocks

    def append_token(self, request_id: int) -> AppendResult:
        if request_id not in self.allocations:
            raise UnknownRequest(f"request {request_id} has no allocation")
        new_tokens = self._tokens[request_id] + 1
        capacity = self.allocations[request_id] * self.block_size_tokens
        if new_tokens <= capacity:
            self._tokens[request_id] = new_tokens
            return AppendResult(needs_block=False, granted=True)
        if self.free_blocks == 0:
            # state unchanged; caller enters the preemption path
            return AppendResult(needs_block=True, granted=False)
        self.free_blocks -= 1
        self.allocations[request_id] += 1
        self._tokens[request_id] = new_tokens
        return AppendResult(needs_block=True, granted=True)

    def free(self, request_id: int) -> int:
        if request_id not in self.allocations:
            raise UnknownRequest(f"request {request_id} has no allocation")
        blocks = self.allocations.pop(request_id)
        del self._tokens[request_id]
        self.free_blocks += blocks
        return blocks

    def swap_out(self, request_id: int) -> int:
        if request_id not in self.allocations:
            raise UnknownRequest(f"request {request_id} has no allocation")
        blocks = self.allocations.pop(request_id)
        self.swapped[request_id] = blocks
        self.free_blocks += blocks
        return blocks

    def swap_in(self, request_id: int) -> int:
        if request_id not in self.swapped:
            raise UnknownRequest(f"request {request_id} is not swapped out")
        blocks = self.swapped[request_id]
        if self.free_blocks < blocks + self.watermark_blocks:
            raise InsufficientBlocks(
                f"swap_in needs {blocks} blocks, free {self.free_blocks}")
        del self.swapped[request_id]
        self.allocations[request_id] = blocks
        self.free_blocks -= blocks
        return blocks

    def can_swap_in(self, request_id: int) -> bool:
        if request_id not in self.swapped:
            raise UnknownRequest(f"request {request_id} is not swapped out")
        return self.free_blocks >= self.swapped[request_id] + self.watermark_blocks

    def context_tokens(self, request_id: int) -> int:
        return self._tokens[request_id]

    def used_fraction(self) -> float:
        return (self.total_blocks - self.free_blocks) / self.total_blocks

    def usage(self, t_us: int = 0) -> KvUsageSample:
        return KvUsageSample(t_us=t_us, used_fraction=self.used_fraction())

    def check_conservation(self) -> None:
        allocated = sum(self.allocations.values())
        if self.free_blocks + allocated != self.total_blocks:
            raise AssertionError(
                f"block conservation violated: free={self.free_blocks} "
                f"allocated={allocated} total={self.total_blocks}")
        if not 0 <= self.free_blocks <= self.total_blocks:
            raise AssertionError(f"free_blocks out of range: {self.free_blocks}")
        for rid, blocks in self.allocations.items():
            if blocks < self.blocks_for(self._tokens[rid]):
                raise AssertionError(
                    f"request {rid} holds {blocks} blocks for "
                    f"{self._tokens[rid]} tokens")
