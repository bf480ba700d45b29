"""Single-leader node-weighted baseline: every operation takes the slow path."""

from .protocol import Operation, Path
from .slow_path import LeaderState


def baseline_route(op: Operation) -> Path:
    return Path.SLOW


def baseline_leader(leader_id, batch_size: int) -> LeaderState:
    """Slow-path leader with conflict-aware batching switched off."""
    return LeaderState(leader_id=leader_id, batch_size=batch_size, conflict_aware=False)
