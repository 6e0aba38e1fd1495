"""Corridor-regularized flow matching for action-chunk generation."""

from .corridor import (
    CorridorConfig,
    CorridorEval,
    anchor_pred_loss,
    buffer_loss,
    consistency_loss,
    corridor_eval,
    corridor_term,
    corridor_width,
    extract_anchors_g,
    total_loss,
)
from .diffcore import AdamState, ParamStore, Tape, grad_check, opt_step
from .flowmatch import (
    ModelSpec,
    VelocityFieldModel,
    decode_estimate,
    euler_sample,
    fm_loss,
    interpolate,
)
from .geometry import (
    AnchorIndexSet,
    dp_minimax_select,
    point_segment_distance,
    rdp_simplify,
    segment_max_error,
    select_anchor_indices,
    uniform_select,
)
from .harness import EvalReport, TrainSettings, evaluate, run_ablation_suite, train
from .synthdata import (
    AnchorSpec,
    DatasetConfig,
    Episode,
    GenParams,
    TaskContext,
    build_anchor_spec,
    chunk_episode,
    gen_episode,
    generate_dataset,
    read_dataset,
    write_dataset,
)

__version__ = "0.1.0"
