"""Campaign configuration: YAML loading and model construction.

A campaign file has one section per subsystem::

    model:    {kind: tan | tan_slice | linear_gaussian, ...}
    terrain:  {kind: two_zone | two_hill | ramp | flat, ...} or {file: map.asc}
    filter:   FilterConfig fields plus selection settings
    mpc:      DualMpcConfig fields
    info:     InfoCostSpec fields
    bounds:   {eps, eps_bound, C_tilde, q}
    oracle:   {lo, hi, counts}
    campaign: {controller, trials, horizon, base_seed, n_sweep, repetitions, out_dir, ...}

Missing keys fall back to the defaults below; see ``configs/`` for examples.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import terrain as terrain_mod
from .dual_control import DualMpcConfig, InfoCostSpec
from .model import ModelSpec, linear_gaussian_1d
from .particle_filter import FilterConfig
from .tan import TanCost, TanParams, build_tan_model, tan_slice_model

CONTROLLERS = ("dual", "certainty_equivalent", "zero", "constant")
SELECTION_MODES = ("none", "constant", "oracle_fraction")


@dataclass
class CampaignSpec:
    model: dict[str, Any] = field(default_factory=lambda: {"kind": "linear_gaussian"})
    terrain: dict[str, Any] = field(default_factory=dict)
    filter: dict[str, Any] = field(default_factory=dict)
    # selection level: none, a constant gamma/2, or a fraction of the oracle's predicted mean likelihood
    selection: dict[str, Any] = field(default_factory=lambda: {"mode": "none"})
    mpc: dict[str, Any] = field(default_factory=dict)
    info: dict[str, Any] = field(default_factory=dict)
    bounds: dict[str, Any] = field(default_factory=lambda: {"eps": 0.1, "eps_bound": 0.1,
                                                            "C_tilde": 1.0, "q": 0.5})
    oracle: dict[str, Any] = field(default_factory=dict)
    controller: str = "zero"
    constant_control: list[float] | None = None
    trials: int = 1
    horizon: int = 20
    base_seed: int = 0
    n_sweep: list[int] = field(default_factory=lambda: [50, 200, 800, 3200])
    repetitions: int = 1000
    # fixed true initial state; None draws it from the prior
    initial_state: list[float] | None = None
    split_x: float | None = None
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if any(b <= a for a, b in zip(self.n_sweep, self.n_sweep[1:])):
            raise ValueError("N-sweep must be strictly increasing")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}; choose from {CONTROLLERS}")
        if self.selection.get("mode", "none") not in SELECTION_MODES:
            raise ValueError(f"selection mode must be one of {SELECTION_MODES}")

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CampaignSpec":
        d = copy.deepcopy(d)
        flat = dict(d.pop("campaign", {}) or {})
        flat.update(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(flat) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**flat)

    def replace(self, **changes) -> "CampaignSpec":
        d = self.to_dict()
        for key, val in changes.items():
            if isinstance(val, dict) and isinstance(d.get(key), dict):
                d[key] = {**d[key], **val}
            else:
                d[key] = val
        return CampaignSpec.from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_config(path: str | Path) -> CampaignSpec:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return CampaignSpec.from_dict(data)


def dump_config(spec: CampaignSpec, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_terrain(cfg: dict[str, Any]) -> terrain_mod.TerrainMap | None:
    if not cfg:
        return None
    cfg = dict(cfg)
    if "file" in cfg:
        return terrain_mod.read_ascii_grid(cfg["file"])
    kind = cfg.pop("kind")
    for key in ("origin", "slope"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    if "centers" in cfg:
        cfg["centers"] = tuple(tuple(c) for c in cfg["centers"])
    return terrain_mod.generate(kind, **cfg)


def _diag_or_matrix(v, n):
    a = np.asarray(v, dtype=float)
    return np.diag(a) if a.ndim == 1 else a.reshape(n, n)


def build_model(campaign: CampaignSpec) -> tuple[ModelSpec, terrain_mod.TerrainMap | None]:
    m = dict(campaign.model)
    kind = m.pop("kind")
    terr = build_terrain(campaign.terrain)
    if kind == "linear_gaussian":
        return linear_gaussian_1d(**m), terr
    if terr is None:
        raise ValueError(f"model kind {kind!r} needs a terrain section")
    if kind == "tan_slice":
        return tan_slice_model(terr, **m), terr
    if kind == "tan":
        tp = dict(m.pop("tan", {}))
        if "Q" in tp:
            tp["Q"] = _diag_or_matrix(tp["Q"], 6)
        if "noise_sigma" in tp:
            tp["noise_sigma"] = np.asarray(tp["noise_sigma"], dtype=float)
        if isinstance(tp.get("noise_support_radius"), str):
            tp["noise_support_radius"] = float(tp["noise_support_radius"])
        params = TanParams(**tp)
        cost_cfg = dict(m.pop("cost", {}))
        if "goal" in cost_cfg:
            cost_cfg["goal"] = np.asarray(cost_cfg["goal"], dtype=float)
        spec = build_tan_model(terr, params, np.asarray(m.pop("initial_mean"), dtype=float),
                               _diag_or_matrix(m.pop("initial_cov"), 6), TanCost(**cost_cfg))
        if m:
            raise ValueError(f"unknown tan model keys: {sorted(m)}")
        return spec, terr
    raise ValueError(f"unknown model kind {kind!r}")


def build_filter_config(campaign: CampaignSpec, particles: int | None = None) -> FilterConfig:
    f = dict(campaign.filter)
    if particles is not None:
        f["particle_count"] = int(particles)
    return FilterConfig(**f)


def build_mpc(campaign: CampaignSpec) -> tuple[DualMpcConfig, InfoCostSpec]:
    info = dict(campaign.info)
    if info.get("coordinates") is not None:
        info["coordinates"] = tuple(info["coordinates"])
    return DualMpcConfig(**campaign.mpc), InfoCostSpec(**info)
