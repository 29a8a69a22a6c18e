"""Case-level evaluation: Dice, average symmetric surface distance,
voxelwise precision/recall, and the lesion-wise detection rate.

Lesion matching dilates both masks by a 2-voxel Euclidean ball, labels the
dilated masks, and counts a ground-truth lesion as found when its dilated
component intersects any dilated prediction component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion, generate_binary_structure, label
from scipy.spatial import cKDTree

from .morphology import ball_structure, connectivity_structure
from .volume import LabelVolume, require_aligned

#: ASSD sentinel when either surface is empty
ASSD_UNDEFINED = math.inf


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    precision_defined: bool
    recall_defined: bool


@dataclass(frozen=True)
class LesionMatch:
    ln_found: float
    tp: int
    fp: int
    fn: int
    defined: bool


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    assd_mm: float
    precision: float
    recall: float
    precision_defined: bool
    recall_defined: bool
    ln_found: float
    ln_defined: bool
    lesion_tp: int
    lesion_fp: int
    lesion_fn: int

    def to_dict(self):
        return {
            "dice": self.dice,
            "assd_mm": None if math.isinf(self.assd_mm) else self.assd_mm,
            "precision": self.precision,
            "recall": self.recall,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
            "ln_found": self.ln_found if self.ln_defined else None,
            "ln_defined": self.ln_defined,
            "lesion_tp": self.lesion_tp,
            "lesion_fp": self.lesion_fp,
            "lesion_fn": self.lesion_fn,
        }


def dice(pred: LabelVolume, gt: LabelVolume) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1 by convention."""
    require_aligned(pred, gt, what="prediction and ground truth")
    a = pred.data > 0
    b = gt.data > 0
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / denom


def surface_voxels(mask: LabelVolume) -> np.ndarray:
    """Indices of foreground voxels with a 6-neighbor background voxel
    (volume boundary counts as background)."""
    fg = mask.data > 0
    eroded = binary_erosion(fg, structure=generate_binary_structure(3, 1), border_value=0)
    return np.argwhere(fg & ~eroded)


def assd(pred: LabelVolume, gt: LabelVolume) -> float:
    """Average symmetric surface distance in mm between surface voxel centers.

    Pooled mean over both surfaces of the nearest-neighbor distance to the
    other surface. Returns the +inf sentinel when either mask is empty.
    """
    require_aligned(pred, gt, what="prediction and ground truth")
    sa = surface_voxels(pred)
    sb = surface_voxels(gt)
    if sa.size == 0 or sb.size == 0:
        return ASSD_UNDEFINED
    pa = pred.geometry.index_to_physical(sa)
    pb = gt.geometry.index_to_physical(sb)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))


def precision_recall(pred: LabelVolume, gt: LabelVolume) -> PrecisionRecall:
    """Voxelwise TP/(TP+FP) and TP/(TP+FN); empty denominators yield 1.0
    with the corresponding flag cleared."""
    require_aligned(pred, gt, what="prediction and ground truth")
    a = pred.data > 0
    b = gt.data > 0
    tp = float(np.logical_and(a, b).sum())
    n_pred = float(a.sum())
    n_gt = float(b.sum())
    precision_defined = n_pred > 0
    recall_defined = n_gt > 0
    precision = tp / n_pred if precision_defined else 1.0
    recall = tp / n_gt if recall_defined else 1.0
    return PrecisionRecall(precision, recall, precision_defined, recall_defined)


def ln_found(pred: LabelVolume, gt: LabelVolume, dilation_vox: int = 2,
             connectivity: int = 26) -> LesionMatch:
    """Lesion-wise recall after dilating both masks.

    tp counts ground-truth components (labeled on the raw mask) whose dilated
    component touches a dilated prediction component; fp counts dilated
    prediction components touching no dilated ground truth.
    """
    require_aligned(pred, gt, what="prediction and ground truth")
    structure = connectivity_structure(connectivity)
    ball = ball_structure(dilation_vox)

    gt_fg = gt.data > 0
    if not gt_fg.any():
        pred_dil = binary_dilation(pred.data > 0, structure=ball)
        _, n_pred = label(pred_dil, structure=structure)
        return LesionMatch(math.nan, 0, int(n_pred), 0, defined=False)

    gt_raw_lab, n_gt_raw = label(gt_fg, structure=structure)
    gt_dil_lab, _ = label(binary_dilation(gt_fg, structure=ball), structure=structure)
    pred_dil_lab, n_pred_dil = label(
        binary_dilation(pred.data > 0, structure=ball), structure=structure
    )

    overlap = (gt_dil_lab > 0) & (pred_dil_lab > 0)
    matched_gt_dil = set(np.unique(gt_dil_lab[overlap]))
    matched_pred_dil = set(np.unique(pred_dil_lab[overlap]))

    tp = 0
    for comp in range(1, n_gt_raw + 1):
        # the dilated component containing this raw component
        dil_id = gt_dil_lab[gt_raw_lab == comp][0]
        if dil_id in matched_gt_dil:
            tp += 1
    fn = n_gt_raw - tp
    fp = n_pred_dil - len(matched_pred_dil)
    return LesionMatch(tp / (tp + fn), tp, fp, fn, defined=True)


def evaluate_case(pred: LabelVolume, gt: LabelVolume,
                  dilation_vox: int = 2, connectivity: int = 26) -> MetricsReport:
    """All metrics for one case; undefined metrics carry flags, never abort."""
    pr = precision_recall(pred, gt)
    lesions = ln_found(pred, gt, dilation_vox, connectivity)
    return MetricsReport(
        dice=dice(pred, gt),
        assd_mm=assd(pred, gt),
        precision=pr.precision,
        recall=pr.recall,
        precision_defined=pr.precision_defined,
        recall_defined=pr.recall_defined,
        ln_found=lesions.ln_found,
        ln_defined=lesions.defined,
        lesion_tp=lesions.tp,
        lesion_fp=lesions.fp,
        lesion_fn=lesions.fn,
    )
