from .calibrate import InsufficientData, calibrate
from .costs import (
    CHECKPOINT,
    NONE,
    OFFLOAD,
    STRATEGIES,
    CostModel,
    CostOverrides,
    EmptyStage,
    LayerOption,
    Load,
    StageCost,
    build_stage_graph,
    stage_cost_table,
)
from .graph import (
    CPU,
    GPU,
    LINK,
    CycleDetected,
    OperatorNode,
    SimGraph,
    SimTimeline,
    TensorNode,
    op_latency,
    simulate,
    timeline_csv,
)
