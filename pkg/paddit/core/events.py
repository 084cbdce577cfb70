"""Progress events published by the augmentation pipelines.

Pipelines call :func:`broadcast_event` for every subject they start, every
image/label pair they write and every subject they give up on. Anything that
wants live progress (the CLI, tests) subscribes with :func:`subscribe`.
"""

from __future__ import annotations

import asyncio
from typing import Any, Literal

EventType = Literal["subject_started", "pair_written", "subject_failed", "run_completed"]

_event_subscribers: set[asyncio.Queue] = set()


async def subscribe(maxsize: int = 0) -> asyncio.Queue:
    """Register a new queue that receives every subsequent event."""
    queue: asyncio.Queue = asyncio.Queue(maxsize=maxsize)
    _event_subscribers.add(queue)
    return queue


def unsubscribe(queue: asyncio.Queue) -> None:
    _event_subscribers.discard(queue)


def make_event(event_type: EventType, **payload: Any) -> dict[str, Any]:
    return {"type": event_type, **payload}


async def broadcast_event(event: dict[str, Any]) -> None:
    """Deliver an event to all subscribers; full queues are dropped."""
    dead_queues = []
    for queue in _event_subscribers:
        try:
            queue.put_nowait(event)
        except asyncio.QueueFull:
            dead_queues.append(queue)

    for queue in dead_queues:
        _event_subscribers.discard(queue)


def drain(queue: asyncio.Queue) -> list[dict[str, Any]]:
    """Pop everything currently waiting in a subscriber queue."""
    events = []
    while not queue.empty():
        events.append(queue.get_nowait())
    return events
