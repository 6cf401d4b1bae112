"""Decision-tree-routed attention with trainable trees.

Four attention variants (dense, leaf-restricted, path-averaged, k-ary
leaf-restricted), a small encoder for masked-token training, the 2-D
bootstrapping schedule, and cost/latency instrumentation.
"""

from .attention import (
    AttentionLayerSpec,
    DiagSink,
    compute_node_values,
    full_attention,
    kary_tf_attention,
    multi_head,
    tc_attention,
    tf_attention,
    uniform_alpha,
)
from .bootstrap import (
    BootstrapSchedule,
    BootstrapStage,
    apply_stage,
    make_schedule,
    run_schedule,
    schedule_table,
)
from .costing import (
    CostReport,
    analytic_cost,
    bench_latency,
    bench_report,
    counted_cost,
    occupancy_skew,
    write_cost_csv,
)
from .model import (
    AdamSettings,
    Batch,
    EncoderConfig,
    LayerPlan,
    TrainAbort,
    TrainState,
    build_model,
    forward,
    load_checkpoint,
    mlm_loss,
    save_checkpoint,
    train_step,
)
from .tensor import ComputeTape, NumericError, ShapeError, Tensor, backward
from .tree import (
    TreeFormatError,
    TreeParams,
    balanced_tree,
    bucketize,
    grow,
    lemma1_tree,
    random_tree,
    route,
    route_matrix,
)
from .verify import run_checks

__version__ = "0.1.0"

__all__ = [
    "AdamSettings",
    "AttentionLayerSpec",
    "Batch",
    "BootstrapSchedule",
    "BootstrapStage",
    "ComputeTape",
    "CostReport",
    "DiagSink",
    "EncoderConfig",
    "LayerPlan",
    "NumericError",
    "ShapeError",
    "Tensor",
    "TrainAbort",
    "TrainState",
    "TreeFormatError",
    "TreeParams",
    "analytic_cost",
    "apply_stage",
    "backward",
    "balanced_tree",
    "bench_latency",
    "bench_report",
    "bucketize",
    "build_model",
    "compute_node_values",
    "counted_cost",
    "forward",
    "full_attention",
    "grow",
    "kary_tf_attention",
    "lemma1_tree",
    "load_checkpoint",
    "make_schedule",
    "mlm_loss",
    "multi_head",
    "occupancy_skew",
    "random_tree",
    "route",
    "route_matrix",
    "run_checks",
    "run_schedule",
    "save_checkpoint",
    "schedule_table",
    "tc_attention",
    "tf_attention",
    "train_step",
    "uniform_alpha",
    "write_cost_csv",
]
