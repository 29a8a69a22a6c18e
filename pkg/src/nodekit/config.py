"""Pipeline configuration: JSON manifest of inputs, outputs and module settings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import GinConfig, RampConfig
from .losses import LossConfig
from .postprocess import PostprocessConfig
from .registration import DEFAULT_FEATURE_ORGANS, RegistrationConfig


@dataclass(frozen=True)
class CasePaths:
    """Input volumes for one scan: CT plus organ/lung/annotation masks."""

    id: str
    ct: Path
    organs: dict = field(default_factory=dict)
    lungs: Path | None = None
    gt: Path | None = None
    fg: Path | None = None

    def all_paths(self):
        out = [self.ct] + list(self.organs.values())
        out += [p for p in (self.lungs, self.gt, self.fg) if p is not None]
        return out


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: Path
    atlas: CasePaths | None = None
    subjects: tuple = ()
    priors_pa: Path | None = None
    priors_dm: Path | None = None
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    gin: GinConfig = field(default_factory=GinConfig)
    ramp: RampConfig = field(default_factory=RampConfig)
    organ_selection: tuple = DEFAULT_FEATURE_ORGANS
    atlas_sigma_vox: float = 5.0
    crop_margin_mm: float = 0.0
    seed: int = 0
    source: dict = field(default_factory=dict)

    def subject(self, case_id: str) -> CasePaths:
        for s in self.subjects:
            if s.id == case_id:
                return s
        raise KeyError(f"no subject {case_id!r} in config")

    def config_hash(self) -> str:
        return sha256_text(json.dumps(self.source, sort_keys=True))


def _case_paths(entry: dict, base: Path, default_id="atlas") -> CasePaths:
    organs = {k: base / v for k, v in entry.get("organs", {}).items()}
    opt = {
        k: (base / entry[k]) if entry.get(k) else None
        for k in ("lungs", "gt", "fg")
    }
    return CasePaths(
        id=str(entry.get("id", default_id)),
        ct=base / entry["ct"],
        organs=organs,
        **opt,
    )


def load_config(path, overrides=None) -> PipelineConfig:
    """Load a JSON pipeline config; relative paths resolve against the file.

    ``overrides`` maps dotted keys (e.g. ``seed``, ``postprocess.t``) to
    values replacing what the file says. All referenced input paths must
    exist.
    """
    path = Path(path)
    raw = json.loads(path.read_text())
    for key, value in (overrides or {}).items():
        target = raw
        parts = key.split(".")
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = value
    base = path.parent

    atlas = _case_paths(raw["atlas"], base) if "atlas" in raw else None
    subjects = tuple(
        _case_paths(e, base, default_id=f"case{i}")
        for i, e in enumerate(raw.get("subjects", []))
    )
    pp = raw.get("postprocess", {})
    if pp.get("min_diameter_mm") in ("none", "null"):
        pp = dict(pp, min_diameter_mm=None)

    cfg = PipelineConfig(
        output_dir=base / raw.get("output_dir", "out"),
        atlas=atlas,
        subjects=subjects,
        priors_pa=(base / raw["priors"]["pa"]) if "priors" in raw else None,
        priors_dm=(base / raw["priors"]["dm"]) if "priors" in raw else None,
        registration=RegistrationConfig(**raw.get("registration", {})),
        loss=LossConfig(**raw.get("loss", {})),
        postprocess=PostprocessConfig(**pp),
        gin=GinConfig(**raw.get("gin", {})),
        ramp=RampConfig(**raw.get("ramp", {})),
        organ_selection=tuple(raw.get("organ_selection", DEFAULT_FEATURE_ORGANS)),
        atlas_sigma_vox=float(raw.get("atlas_sigma_vox", 5.0)),
        crop_margin_mm=float(raw.get("crop_margin_mm", 0.0)),
        seed=int(raw.get("seed", 0)),
        source=raw,
    )
    missing = []
    for case in ((cfg.atlas,) if cfg.atlas else ()) + cfg.subjects:
        missing += [str(p) for p in case.all_paths() if not p.exists()]
    for p in (cfg.priors_pa, cfg.priors_dm):
        if p is not None and not p.exists():
            missing.append(str(p))
    if missing:
        raise FileNotFoundError(f"config references missing inputs: {missing}")
    return cfg


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
