"""survkit: surveillance-style detection data toolkit.

Builds augmented YOLO-format training sets by compositing segmented object
sprites under spatial constraints and applying CCTV-style photometric
degradations, and runs slicing-aided inference with detection merging and
standard precision/recall/mAP evaluation against pluggable detector
backends.
"""

__version__ = "0.1.0"

from .dataset import (  # noqa: F401
    AnnotatedImage,
    BBox,
    DatasetManifest,
    Provenance,
    discover_dataset,
    load_manifest,
    parse_label_file,
    remap_single_class,
    serialize_labels,
    split_stats,
    validate_dataset,
)
from .compositor import (  # noqa: F401
    Cutout,
    CutoutBank,
    Placement,
    blend_composite,
    build_cutout_bank,
    estimate_brightness,
    estimate_noise,
    extract_cutout,
    place_center,
    place_edge,
    place_overlap,
    rotate_cutout,
    sample_scale,
)
from .degradations import (  # noqa: F401
    DegradationSpec,
    apply_bundle,
    color_grade,
    contrast_stretch,
    hist_eq,
    spatial_filter,
    stripe_noise,
)
from .planner import (  # noqa: F401
    AugmentationPlan,
    AugmentOptions,
    AugmentReport,
    RatioConfig,
    build_plan,
    execute_plan,
    parse_ratio_config,
    report_stats,
)
from .slicer import (  # noqa: F401
    Detection,
    SliceGrid,
    compute_slice_grid,
    iou,
    nms,
    remap_detection,
    sliced_inference,
)
from .backends import (  # noqa: F401
    DetectRequest,
    DetectResponse,
    ExternalBackend,
    InferenceFrame,
    MyopicBackend,
    MyopicDetectorSpec,
    detect_myopic,
    run_transcript,
)
from .evaluation import (  # noqa: F401
    EvalReport,
    MatchLedger,
    average_precision,
    evaluate,
    match_detections,
)
from .errors import (  # noqa: F401
    BackendError,
    BlendError,
    CutoutError,
    EvalError,
    LabelParseError,
    ManifestError,
    PlacementFailed,
    PlanError,
    ProtocolError,
    SurvkitError,
)
