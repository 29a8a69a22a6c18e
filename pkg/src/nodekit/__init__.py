"""nodekit: atlas-prior toolkit for mediastinal lymph node segmentation.

Registration-based occurrence/distance priors, prior-weighted loss
functionals, intensity augmentation, probabilistic post-processing, and
lesion-wise evaluation for chest CT volumes.
"""

from .atlas import (
    DistanceMapPrior,
    ProbAtlas,
    build_distance_prior,
    build_prob_atlas,
    find_carina,
    transfer_priors,
)
from .augment import (
    GinConfig,
    RampConfig,
    augment_pipeline,
    gin_transform,
    ipa_blend,
    pseudo_correlation_map,
    rampup_weight,
)
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateIntensityError,
    EmptyMaskError,
    GeometryError,
    LandmarkError,
    NiftiFormatError,
    NodekitError,
    UnsupportedDatatypeError,
)
from .losses import (
    LossConfig,
    LossResult,
    ProbVolume,
    WeightMap,
    combined_loss,
    cross_entropy,
    deep_supervision_loss,
    pa_weight_map,
    soft_dice_loss,
    supervision_pyramid,
    tversky_loss,
)
from .metrics import (
    LesionMatch,
    MetricsReport,
    PrecisionRecall,
    assd,
    dice,
    evaluate_case,
    ln_found,
    precision_recall,
)
from .postprocess import (
    ComponentSet,
    ComponentStats,
    PostprocessConfig,
    adaptive_binarize,
    connected_components,
    ensemble,
    filter_small_components,
    lung_hull_mask,
    run_postprocess,
)
from .registration import (
    ATLAS_TO_SUBJECT,
    SUBJECT_TO_ATLAS,
    AffineTransform,
    DisplacementField,
    RegistrationConfig,
    load_affine,
    load_field,
    masks_to_feature,
    register_affine,
    register_rigid,
    register_variational,
    rigid_from_params,
    rotate_field_into,
    save_affine,
    save_field,
    signed_distance,
    warp,
)
from .ssl import SoftmaxVolume, ema_update, entropy_map, pseudo_label, reliability_mask
from .volume import (
    CropRecord,
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    apply_crop,
    crop_to_mask_bbox,
    geometry_aligned,
    normalize_ct,
    pad_to_original,
    read_nifti,
    resample,
    write_nifti,
)

__version__ = "0.1.0"
