"""
Scenario clocks.

Every simulated delay in the gateway (migration, control-hop latency, stage service time,
reconcile period) is expressed as a callback scheduled on a ``Scheduler``. Callbacks never
sleep; they schedule continuations instead, which lets one code path run both against a
deterministic virtual timeline and against wall-clock time.
"""

import asyncio
import heapq
import inspect
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Set

import structlog

logger = structlog.get_logger(__name__)

Callback = Callable[..., Any]


class TimerHandle:
    """Cancellable reference to a scheduled callback."""

    def __init__(self, when_ms: int):
        self.when_ms = when_ms
        self.cancelled = False
        self._real: Optional[asyncio.TimerHandle] = None

    def cancel(self) -> None:
        self.cancelled = True
        if self._real is not None:
            self._real.cancel()


class Scheduler(ABC):
    """Millisecond-resolution scheduler shared by all domains of a deployment."""

    virtual: bool = False

    def __init__(self) -> None:
        self.callback_errors = 0

    @property
    @abstractmethod
    def now_ms(self) -> int:
        """Current scenario time in milliseconds."""

    @abstractmethod
    def call_at(self, when_ms: int, callback: Callback, *args: Any) -> TimerHandle:
        """Run ``callback(*args)`` at ``when_ms``; coroutine callbacks are awaited."""

    @abstractmethod
    async def run_until(self, when_ms: int) -> None:
        """Let scenario time advance up to ``when_ms``."""

    @abstractmethod
    async def retry_sleep(self, seconds: float) -> None:
        """Back-off sleep used by control-plane retries."""

    def call_later(self, delay_ms: int, callback: Callback, *args: Any) -> TimerHandle:
        if delay_ms < 0:
            raise ValueError("delay_ms must be non-negative")
        return self.call_at(self.now_ms + int(delay_ms), callback, *args)

    async def _invoke(self, callback: Callback, args: tuple) -> None:
        try:
            result = callback(*args)
            if inspect.isawaitable(result):
                await result
        except Exception as error:
            self.callback_errors += 1
            logger.exception(
                "Scheduled callback failed",
                callback=getattr(callback, "__qualname__", repr(callback)),
                error=str(error),
            )


@dataclass(order=True)
class _ScheduledCallback:
    """Heap entries order by time, then by submission sequence."""

    when_ms: int
    seq_no: int
    callback: Callback = field(compare=False)
    args: tuple = field(compare=False)
    handle: TimerHandle = field(compare=False)


class VirtualScheduler(Scheduler):
    """
    Deterministic discrete-event scheduler.

    Time advances only when ``run_until`` pops the next callback; callbacks scheduled for
    the same millisecond run in submission order.
    """

    virtual = True

    def __init__(self, start_ms: int = 0):
        super().__init__()
        if start_ms < 0:
            raise ValueError("start_ms must be non-negative")
        self._now_ms = start_ms
        self._queue: List[_ScheduledCallback] = []
        self._next_seq = 1

    @property
    def now_ms(self) -> int:
        return self._now_ms

    def call_at(self, when_ms: int, callback: Callback, *args: Any) -> TimerHandle:
        if when_ms < self._now_ms:
            raise ValueError("cannot schedule in the past")
        handle = TimerHandle(when_ms)
        heapq.heappush(
            self._queue, _ScheduledCallback(when_ms, self._next_seq, callback, args, handle)
        )
        self._next_seq += 1
        return handle

    def has_pending(self) -> bool:
        return any(not entry.handle.cancelled for entry in self._queue)

    def peek_next_ms(self) -> Optional[int]:
        while self._queue and self._queue[0].handle.cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].when_ms if self._queue else None

    async def run_until(self, when_ms: int) -> None:
        while True:
            next_ms = self.peek_next_ms()
            if next_ms is None or next_ms > when_ms:
                break
            entry = heapq.heappop(self._queue)
            self._now_ms = entry.when_ms
            await self._invoke(entry.callback, entry.args)
        self._now_ms = max(self._now_ms, when_ms)

    async def retry_sleep(self, seconds: float) -> None:
        # retries happen at the same virtual instant
        return None


class RealScheduler(Scheduler):
    """
    Wall-clock scheduler backed by the running event loop.

    Time 0 is construction time, or ``epoch_ms`` (wall-clock milliseconds) when given, so
    schedulers in separate processes can share one timeline.
    """

    def __init__(self, epoch_ms: Optional[int] = None) -> None:
        super().__init__()
        self._loop = asyncio.get_event_loop()
        self._origin = self._loop.time()
        if epoch_ms is not None:
            self._origin -= (time.time() * 1000 - epoch_ms) / 1000
        self._tasks: Set["asyncio.Task[None]"] = set()

    @property
    def now_ms(self) -> int:
        return int((self._loop.time() - self._origin) * 1000)

    def call_at(self, when_ms: int, callback: Callback, *args: Any) -> TimerHandle:
        handle = TimerHandle(when_ms)
        delay_s = max(0.0, (when_ms - self.now_ms) / 1000)
        handle._real = self._loop.call_later(delay_s, self._spawn, callback, args)
        return handle

    def _spawn(self, callback: Callback, args: tuple) -> None:
        task = self._loop.create_task(self._invoke(callback, args))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def run_until(self, when_ms: int) -> None:
        remaining = when_ms - self.now_ms
        if remaining > 0:
            await asyncio.sleep(remaining / 1000)

    async def retry_sleep(self, seconds: float) -> None:
        await asyncio.sleep(seconds)

    async def close(self) -> None:
        """Wait for callbacks that are still running."""
        if self._tasks:
            await asyncio.gather(*list(self._tasks), return_exceptions=True)
