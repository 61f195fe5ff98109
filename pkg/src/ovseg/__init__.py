"""Diagnostics for open-vocabulary panoptic segmentation: PQ evaluation and oracle ablations."""

from .core import (
    BinaryMask,
    ClassInfo,
    FormatError,
    InvariantViolation,
    OvsegError,
    PanopticMap,
    RleMask,
    SoftMask,
    Taxonomy,
    ValidationError,
    panoptic_to_masks,
    rle_decode,
    rle_encode,
    taxonomy_split,
)
from .metrics import MatchReport, evaluate_image, iou, pq_match, pq_scores, stratify_false_negatives
from .oracles import (
    Assignment,
    AssignmentCostParams,
    bce_dice_cost,
    classification_oracle,
    classification_oracle_on_selection,
    hungarian,
    segmentation_oracle_on_selection,
    selection_oracle,
)
from .proposals import (
    CandidateSet,
    FusionParams,
    binarize,
    drop_no_object,
    geometric_ensemble,
    panoptic_fusion,
    strip_no_object_logit,
)
from .zeroshot import (
    DenseFeatureGrid,
    TextEmbeddings,
    cosine_logits,
    mask_pool,
    segmentation_oracle_eval,
    softmax_temperature,
)

__version__ = "0.1.0"
