"""Training configuration: loss weights, learning rates, iteration counts and seeds.

Stored as YAML. Unknown keys are rejected so typos do not silently fall back to defaults.
"""
from dataclasses import asdict, dataclass, field, fields

import yaml

from ..errors import ConfigurationError


@dataclass
class LossWeights:
    photometric: float = 1.0
    ssim: float = 0.2
    depth: float = 0.1
    normal: float = 0.05
    shrink: float = 1e-3
    laplacian: float = 10.0
    normal_consistency: float = 0.1
    edge_length: float = 1.0
    silhouette: float = 0.01
    solid: float = 0.1
    aiap: float = 1.0
    delta: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ConfigurationError(f"loss weight {f.name} must be nonnegative, got {v}")

    @property
    def diffuse_photometric(self):
        return 3.0 * self.photometric


def _face_lr():
    return {"diffuse": 5e-3, "view": 5e-3, "dynamic": 5e-3, "displacement": 1e-4, "pix": 1e-4}


def _hair_lr():
    # position rate is multiplied by the canonical cloud extent at run time
    return {"x": 1.6e-4, "o": 5e-2, "s": 5e-3, "r": 1e-3, "sh": 2.5e-3}


def _joint_lr():
    return {"field": 1e-4, "embedding": 1e-4, "diffuse": 5e-3, "view": 5e-3, "dynamic": 5e-3}


def _edit_lr():
    return {"diffuse": 1e-2, "pix": 1e-4}


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    face_lr: dict = field(default_factory=_face_lr)
    hair_lr: dict = field(default_factory=_hair_lr)
    joint_lr: dict = field(default_factory=_joint_lr)
    edit_lr: dict = field(default_factory=_edit_lr)
    face_iters: int = 2000
    hair_iters: int = 2000
    joint_iters: int = 1000
    edit_iters: int = 500
    seed: int = 0
    depth_threshold: float = 0.005
    blur_sigma: float = 2.0
    erode_radius: int = 5
    aiap_k: int = 5
    prune_every: int = 500
    prune_threshold: float = 0.005
    use_displacement: bool = True
    log_every: int = 10

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        if "weights" in d:
            w = d["weights"] or {}
            wk = {f.name for f in fields(LossWeights)}
            if set(w) - wk:
                raise ConfigurationError(f"unknown loss weights: {sorted(set(w) - wk)}")
            d["weights"] = LossWeights(**w)
        base = cls()
        for name in ("face_lr", "hair_lr", "joint_lr", "edit_lr"):
            if name in d:
                merged = dict(getattr(base, name))
                bad = set(d[name] or {}) - set(merged)
                if bad:
                    raise ConfigurationError(f"unknown {name} entries: {sorted(bad)}")
                merged.update(d[name] or {})
                d[name] = merged
        return cls(**d)

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigurationError("config root must be a mapping")
        return cls.from_dict(data)
