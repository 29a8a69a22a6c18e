"""Run orchestration: atlas construction, per-case prior preparation, and
batch evaluation. These functions do the work behind the CLI subcommands and
write deterministic outputs (stable file names, hash-based provenance, no
timestamps).
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import report as report_mod
from .atlas import (
    DistanceMapPrior,
    ProbAtlas,
    build_distance_prior,
    build_prob_atlas,
    find_carina,
    transfer_priors,
)
from .augment import augment_pipeline
from .config import PipelineConfig, sha256_file
from .errors import NodekitError
from .losses import (
    LossConfig,
    ProbVolume,
    combined_loss,
    cross_entropy,
    pa_weight_map,
    soft_dice_loss,
    tversky_loss,
)
from .metrics import evaluate_case
from .postprocess import PostprocessConfig, run_postprocess
from .registration import (
    ATLAS_TO_SUBJECT,
    SUBJECT_TO_ATLAS,
    DisplacementField,
    masks_to_feature,
    register_affine,
    register_rigid,
    register_variational,
    rotate_field_into,
    save_affine,
    save_field,
    warp,
)
from .volume import (
    CropRecord,
    LabelVolume,
    ScalarVolume,
    apply_crop,
    crop_to_mask_bbox,
    normalize_ct,
    read_nifti,
    write_nifti,
)


def _read_label(path) -> LabelVolume:
    return read_nifti(path, as_label=True)


def _read_prob(path) -> ProbVolume:
    vol = read_nifti(path, as_label=False)
    return ProbVolume(vol.geometry, np.clip(vol.data, 0.0, 1.0))


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _case_masks(case, selection):
    organs = {name: _read_label(p) for name, p in case.organs.items()}
    lungs = _read_label(case.lungs) if case.lungs else None
    selection = tuple(s for s in selection if s in organs)
    if not selection:
        selection = tuple(organs)
    return organs, lungs, selection


def _case_inputs(case, selection):
    """Feature image and normalized CT for one scan."""
    organs, lungs, selection = _case_masks(case, selection)
    feature = masks_to_feature(organs, selection)
    ct = read_nifti(case.ct, as_label=False)
    if case.fg:
        fg = _read_label(case.fg)
    else:
        union = np.zeros(ct.dims, dtype=np.uint8)
        for m in organs.values():
            union |= (m.data > 0).astype(np.uint8)
        if lungs is not None:
            union |= (lungs.data > 0).astype(np.uint8)
        fg = LabelVolume(ct.geometry, union)
    ct_norm = normalize_ct(ct, fg)
    return feature, ct_norm, lungs


def _mse(a: ScalarVolume, b: ScalarVolume) -> float:
    return float(np.mean((a.data - b.data) ** 2))


def register_pair(fixed_feat, moving_feat, fixed_ct, moving_ct, cfg, tag):
    """Rigid -> affine on mask features, then demons on normalized CT.

    Returns the affine, the composed displacement field (usable directly in
    ``warp(vol, affine, field)``), and the MSE trail for the manifest.
    """
    rigid = register_rigid(fixed_feat, moving_feat, cfg)
    affine = register_affine(fixed_feat, moving_feat, rigid, cfg)
    zero = DisplacementField.zero(fixed_ct.geometry, tag)
    resampled = warp(moving_ct, affine=None, field=zero)
    prewarped = warp(moving_ct, affine=affine, field=zero)
    raw_field = register_variational(fixed_ct, prewarped, cfg, direction_tag=tag)
    field = rotate_field_into(affine, raw_field)
    warped = warp(moving_ct, affine=affine, field=field)
    residuals = {
        "mse_initial": _mse(fixed_ct, resampled),
        "mse_after_linear": _mse(fixed_ct, prewarped),
        "mse_after_deformable": _mse(fixed_ct, warped),
    }
    return affine, field, residuals


# ---------------------------------------------------------------------------
# build-atlas
# ---------------------------------------------------------------------------

def _atlas_subject_worker(args):
    """Register one annotated subject to the atlas and persist its transforms."""
    config, case_id = args
    case = config.subject(case_id)
    tdir = config.output_dir / "atlas" / "transforms"
    try:
        atlas_feat, atlas_ct, _ = _case_inputs(config.atlas, config.organ_selection)
        feat, ct_norm, _ = _case_inputs(case, config.organ_selection)
        affine, field, residuals = register_pair(
            atlas_feat, feat, atlas_ct, ct_norm, config.registration, SUBJECT_TO_ATLAS
        )
        gt = _read_label(case.gt).binarized()
        warped_gt = warp(gt, affine=affine, field=field)
    except (NodekitError, ValueError) as exc:
        return {"id": case.id, "error": f"{type(exc).__name__}: {exc}"}, None
    save_affine(affine, tdir / f"{case.id}_affine.txt")
    save_field(field, tdir / f"{case.id}_field.nii.gz")
    entry = {
        "id": case.id,
        "residuals": residuals,
        "inputs": {"ct": sha256_file(case.ct), "gt": sha256_file(case.gt)},
    }
    return entry, warped_gt


def build_atlas(config: PipelineConfig, jobs: int = 1) -> dict:
    """Register every annotated subject to the atlas, average the warped
    annotations into the occurrence prior, and derive the distance prior.

    Per-subject failures are recorded in the manifest and skipped; the run
    fails only when no subject succeeds.
    """
    if config.atlas is None:
        raise ValueError("config has no atlas section")
    annotated = [s for s in config.subjects if s.gt is not None]
    if not annotated:
        raise ValueError("build-atlas needs at least one subject with a gt mask")
    if "trachea" not in config.atlas.organs:
        raise ValueError("atlas organs must include a trachea mask for the carina")
    if config.atlas.lungs is None:
        raise ValueError("atlas needs a lung mask to normalize the distance prior")

    out_dir = config.output_dir / "atlas"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "transforms").mkdir(exist_ok=True)

    _, atlas_ct, atlas_lungs = _case_inputs(config.atlas, config.organ_selection)
    work = [(config, case.id) for case in annotated]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_atlas_subject_worker, work))
    else:
        results = [_atlas_subject_worker(w) for w in work]
    entries = [entry for entry, _ in results]
    warped = [wg for _, wg in results if wg is not None]
    if not warped:
        raise NodekitError("atlas construction failed for every subject")

    pa = build_prob_atlas(warped, config.atlas_sigma_vox)
    carina = find_carina(_read_label(config.atlas.organs["trachea"]))
    bbox_region = _bbox_mask(atlas_lungs)
    dm = build_distance_prior(atlas_ct.geometry, carina, bbox_region)

    write_nifti(pa.vol, out_dir / "pa.nii.gz", dtype=np.float32)
    write_nifti(dm.vol, out_dir / "dm.nii.gz", dtype=np.float32)
    manifest = {
        "carina_mm": [float(v) for v in carina],
        "smoothing_sigma_vox": pa.smoothing_sigma_vox,
        "subject_count": pa.subject_count,
        "subjects": sorted(entries, key=lambda e: e["id"]),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "outputs": {"pa": "pa.nii.gz", "dm": "dm.nii.gz"},
    }
    _write_json(out_dir / "manifest.json", manifest)
    return manifest


def _bbox_mask(lungs: LabelVolume) -> LabelVolume:
    fg = lungs.data > 0
    out = np.zeros(lungs.dims, dtype=np.uint8)
    if fg.any():
        idx = np.argwhere(fg)
        lo = idx.min(axis=0)
        hi = idx.max(axis=0) + 1
        out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return LabelVolume(lungs.geometry, out)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _load_priors(config: PipelineConfig):
    atlas_dir = config.output_dir / "atlas"
    pa_path = config.priors_pa or atlas_dir / "pa.nii.gz"
    dm_path = config.priors_dm or atlas_dir / "dm.nii.gz"
    manifest_path = atlas_dir / "manifest.json"
    if not Path(pa_path).exists() or not Path(dm_path).exists():
        raise FileNotFoundError(
            "atlas priors not found; run build-atlas first or set priors paths in the config"
        )
    pa_vol = read_nifti(pa_path, as_label=False)
    dm_vol = read_nifti(dm_path, as_label=False)
    sigma = config.atlas_sigma_vox
    count = 1
    carina = None
    if manifest_path.exists():
        m = json.loads(manifest_path.read_text())
        sigma = m.get("smoothing_sigma_vox", sigma)
        count = m.get("subject_count", count)
        carina = m.get("carina_mm")
    if carina is None:
        source = config.source.get("priors", {})
        carina = source.get("carina_mm")
    if carina is None:
        # fall back to the prior's own minimum (the reference voxel is 0 there)
        idx = np.unravel_index(int(np.argmin(dm_vol.data)), dm_vol.dims)
        carina = dm_vol.geometry.index_to_physical(idx)
    pa = ProbAtlas(ScalarVolume(pa_vol.geometry, np.clip(pa_vol.data, 0, 1)), sigma, count)
    dm = DistanceMapPrior(
        ScalarVolume(dm_vol.geometry, np.clip(dm_vol.data, 0, 1)), tuple(carina)
    )
    return pa, dm


def prepare_case(config: PipelineConfig, case_id: str) -> dict:
    """Register the atlas onto one subject, transfer priors, crop to the lung
    bounding box, and write ``<case>_{ct,pa,dm}.nii.gz`` plus the crop record."""
    case = config.subject(case_id)
    if case.lungs is None:
        raise ValueError(f"subject {case_id!r} needs a lung mask for cropping")
    pa, dm = _load_priors(config)
    atlas_feat, atlas_ct, _ = _case_inputs(config.atlas, config.organ_selection)
    feat, ct_norm, lungs = _case_inputs(case, config.organ_selection)

    affine, field, residuals = register_pair(
        feat, atlas_feat, ct_norm, atlas_ct, config.registration, ATLAS_TO_SUBJECT
    )
    pa_subj, dm_subj = transfer_priors(pa, dm, affine, field, ct_norm.geometry)

    ct_crop, crop = crop_to_mask_bbox(ct_norm, lungs, config.crop_margin_mm)
    pa_crop = apply_crop(pa_subj, crop)
    dm_crop = apply_crop(dm_subj, crop)

    out_dir = config.output_dir / "cases"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(ct_crop, out_dir / f"{case_id}_ct.nii.gz", dtype=np.float32)
    write_nifti(pa_crop, out_dir / f"{case_id}_pa.nii.gz", dtype=np.float32)
    write_nifti(dm_crop, out_dir / f"{case_id}_dm.nii.gz", dtype=np.float32)
    _write_json(out_dir / f"{case_id}_crop.json", crop.to_dict())
    return {
        "id": case_id,
        "residuals": residuals,
        "crop": crop.to_dict(),
        "inputs": {"ct": sha256_file(case.ct)},
        "outputs": [f"{case_id}_ct.nii.gz", f"{case_id}_pa.nii.gz", f"{case_id}_dm.nii.gz"],
    }


def _prepare_worker(args):
    config, case_id = args
    try:
        return prepare_case(config, case_id)
    except (NodekitError, ValueError) as exc:
        return {"id": case_id, "error": f"{type(exc).__name__}: {exc}"}


def prepare_cases(config: PipelineConfig, case_ids=None, jobs: int = 1) -> dict:
    ids = list(case_ids) if case_ids else [s.id for s in config.subjects]
    for cid in ids:
        config.subject(cid)  # unknown ids fail before any work starts
    _load_priors(config)  # missing priors are a config error, not a case error
    work = [(config, cid) for cid in ids]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_prepare_worker, work))
    else:
        entries = [_prepare_worker(w) for w in work]
    manifest = {
        "cases": sorted(entries, key=lambda e: e["id"]),
        "config_hash": config.config_hash(),
        "seed": config.seed,
    }
    _write_json(config.output_dir / "cases" / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# postprocess / loss / augment / evaluate
# ---------------------------------------------------------------------------

def postprocess_files(prob_paths, out_path, cfg: PostprocessConfig,
                      pa_path=None, lungs_path=None, crop_path=None) -> Path:
    probs = [_read_prob(p) for p in prob_paths]
    pa = None
    if pa_path:
        pa_vol = read_nifti(pa_path, as_label=False)
        pa = ScalarVolume(pa_vol.geometry, np.clip(pa_vol.data, 0, 1))
    lungs = _read_label(lungs_path) if lungs_path else None
    crop = None
    if crop_path:
        crop = CropRecord.from_dict(json.loads(Path(crop_path).read_text()))
    if (
        lungs is not None
        and crop is not None
        and lungs.dims != probs[0].dims
        and lungs.dims == crop.full_geometry.dims
    ):
        # hull masking happens on the cropped grid; a full-size lung mask is
        # cropped with the same record (the crop is its bounding box, so no
        # lung voxels are lost)
        lungs = apply_crop(lungs, crop)
    mask = run_postprocess(probs, pa, lungs, crop, cfg)
    write_nifti(mask, out_path)
    return Path(out_path)


def loss_report(pred_path, gt_path, pa_path=None, cfg: LossConfig | None = None) -> dict:
    cfg = cfg or LossConfig()
    pred = _read_prob(pred_path)
    gt = _read_label(gt_path).binarized()
    pa = None
    if pa_path:
        pa_vol = read_nifti(pa_path, as_label=False)
        pa = ScalarVolume(pa_vol.geometry, np.clip(pa_vol.data, 0, 1))
    weights = pa_weight_map(gt, pa, cfg) if pa is not None else None
    out = {
        "cross_entropy": cross_entropy(pred, gt).value,
        "soft_dice": soft_dice_loss(pred, gt).value,
        "weighted_soft_dice": soft_dice_loss(pred, gt, weights).value if weights else None,
        "tversky": tversky_loss(pred, gt, cfg.alpha, cfg.beta).value,
        "combined": combined_loss(pred, gt, pa, cfg).value,
        "config": {
            "lambda1": cfg.lambda1, "lambda2": cfg.lambda2, "lambda3": cfg.lambda3,
            "alpha": cfg.alpha, "beta": cfg.beta,
        },
    }
    return out


def augment_file(in_path, out_path, seed, epoch, gin=None, ramp=None) -> Path:
    vol = read_nifti(in_path, as_label=False)
    out = augment_pipeline(vol, epoch, seed, gin, ramp)
    write_nifti(out, out_path, dtype=np.float32)
    return Path(out_path)


def _pair_files(pred_dir, gt_dir):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = sorted(
        p.name for p in pred_dir.iterdir()
        if p.name.endswith(".nii") or p.name.endswith(".nii.gz")
    )
    pairs = []
    for name in names:
        gt = gt_dir / name
        if gt.exists():
            pairs.append((name, pred_dir / name, gt))
    if not pairs:
        raise FileNotFoundError(f"no matching volumes between {pred_dir} and {gt_dir}")
    return pairs


def _evaluate_worker(item):
    name, pred_path, gt_path = item
    pred = _read_label(pred_path).binarized()
    gt = _read_label(gt_path).binarized()
    case = name.replace(".nii.gz", "").replace(".nii", "")
    return case, evaluate_case(pred, gt).to_dict()


def evaluate_dirs(pred_dir, gt_dir, out_path, jobs: int = 1, figures: bool = True) -> dict:
    """Evaluate every prediction against its ground truth by file name and
    write the JSON report, the CSV table, and the overview figures."""
    pairs = _pair_files(pred_dir, gt_dir)
    if jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_worker, pairs))
    else:
        results = [_evaluate_worker(p) for p in pairs]
    per_case = dict(sorted(results))
    summary = report_mod.summarize(per_case)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    provenance = {
        "pred": {n: sha256_file(p) for n, p, _ in pairs},
        "gt": {n: sha256_file(g) for n, _, g in pairs},
    }
    report_mod.write_json(out_path, per_case, summary, provenance)
    csv_path = out_path.parent / (out_path.stem + ".csv")
    report_mod.write_csv(csv_path, per_case)
    if figures:
        report_mod.render_figures(out_path.parent, per_case)
    return {"summary": summary, "per_case": per_case}
