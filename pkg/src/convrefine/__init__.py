"""convrefine: class-separation analysis and architecture refinement for conv nets."""

from .featio import (
    ActivationSet,
    ClassMeans,
    class_means,
    load_manifest,
    read_labels_file,
    read_tensor_file,
    spatial_average_pool,
    write_labels_file,
    write_tensor_file,
)
from .netir import (
    ConvBlock,
    IRSyntaxError,
    IRValidationError,
    NetworkIR,
    analysis_sequence,
    make_network,
    param_count,
    parse_network,
    serialize_network,
)
from .planner import (
    PlanEntry,
    PlannerConfig,
    RefinementPlan,
    build_plan,
    lambda_upper_bound,
    parse_plan,
    phi,
    psi,
    serialize_plan,
    split_factor,
    stretch_factor,
    xi,
)
from .rewriter import SizeReport, apply_plan, size_report
from .sepstats import (
    CorrelationStack,
    SeparationTally,
    correlation_matrix,
    correlation_stack,
    network_tallies,
    separation_tally,
)
from .evalkit import PredictionDump, precision_at_k, synth_activations

__version__ = "0.1.0"
