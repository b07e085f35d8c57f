"""Physics-guided sparse mixture-of-experts toolkit for SAR-like imagery."""

from .analysis import (
    ActivationTally,
    DominanceEntry,
    DominanceReport,
    descriptor_sensitivity,
    domain_separation_purity,
    domain_tallies,
    dominance_report,
    tally_activations,
)
from .config import DataConfig, ExperimentConfig, ModelConfig, OptimizerConfig
from .descriptors import (
    DEGENERATE_HISTOGRAM,
    ENL_MAX,
    HOMOGENEOUS_IMAGE,
    DescriptorConfig,
    DescriptorVector,
    ScalarDescriptor,
    compute_descriptors,
    directional_entropy,
    equivalent_number_of_looks,
    local_roughness,
    mask_descriptors,
    normalize_descriptors,
)
from .errors import (
    ContractViolationError,
    DimensionMismatchError,
    EmptyReportError,
    InvalidInputError,
    NumericalFailureError,
    RasterFormatError,
    SarmoeError,
)
from .evaluation import (
    AgreementReport,
    BenchmarkManifest,
    ConfusionMatrix,
    IoUReport,
    accumulate,
    discover_pairs,
    evaluate_dataset,
    iou_report,
    load_benchmark_items,
    mean_agreement,
    run_benchmark,
)
from .model import (
    ForwardPass,
    ToyModel,
    image_descriptor,
    infer_image,
    init_toy_model,
    load_checkpoint,
    model_backward,
    model_forward,
    model_parameters,
    patch_majority_labels,
    patchify,
    save_checkpoint,
)
from .moe import (
    ExpertFfn,
    MoeGradients,
    MoeLayer,
    RouterParams,
    RoutingRecord,
    TokenBatch,
    gelu,
    gelu_grad,
    load_balance_loss,
    moe_backward,
    moe_forward,
    route,
    total_loss,
)
from .raster import (
    BasePattern,
    LabelMap,
    LogRaster,
    RasterImage,
    SpeckleSpec,
    generate_labeled_scene,
    generate_speckle,
    log_transform,
    read_labels,
    read_raster,
    write_labels,
    write_raster,
)
from .seeding import substream
from .training import (
    AdamW,
    StepRecord,
    TrainingReport,
    softmax_cross_entropy,
    speckle_domain_dataset,
    train_toy,
)

__version__ = "0.1.0"
