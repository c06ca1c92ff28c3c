"""Execution plans: compilation, validation by replay, Gantt output."""

from .compile import (
    BATCHED_P2P,
    BW_STAGE,
    FW_STAGE,
    IRECV,
    ISEND,
    KINDS,
    WAIT_IRECV,
    WAIT_ISEND,
    Action,
    ExecutionPlan,
    InvalidSchedule,
    compile_plan,
    schedule_digest,
    segment_message_bytes,
)
from .gantt import emit_gantt, gantt_csv, gantt_svg
from .validate import DEADLOCK, UNMATCHED_TAG, UNMATCHED_WAIT, Diagnostic, Replay, replay, validate_plan
