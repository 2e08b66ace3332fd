"""Flat ``key = value`` training configuration.

Defaults are read from the owning modules so there is one source of truth.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .field import FieldConfig
from .hashgrid import GridConfig
from .losses import LossWeights
from .split import SplitConfig

_G, _F, _L, _S = GridConfig(), FieldConfig(), LossWeights(), SplitConfig()


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    precision: int = 32
    iterations: int = 5000
    batch_size: int = 1
    log_interval: int = 10
    probe_interval: int = 50
    checkpoint_interval: int = 1000

    # scene / deformation field
    dyn_dim: int = _F.dyn_dim
    hash_levels: int = _G.levels
    hash_features: int = _G.features
    hash_log2_table: int = _G.log2_table_size
    hash_n_min: int = _G.n_min
    hash_n_max: int = _G.n_max
    hash_n_min_t: int = _G.n_min_t
    hash_n_max_t: int = _G.n_max_t
    lap_k: int = _F.k
    lap_dim: int = _F.d_l
    gate_hidden: int = _F.gate_hidden
    trunk_width: int = _F.trunk_width
    trunk_depth: int = _F.trunk_depth
    time_encoder: str = _F.time_encoder
    freq_grad_scale: bool = True
    sigma_sq_source: str = "auto"  # batch | dataset | auto
    bbox_margin: float = 0.5

    # losses
    lambda_ssim: float = _L.lambda_ssim
    lambda_ncc: float = _L.lambda_ncc
    lambda_lap: float = _L.lambda_lap
    lambda_dy: float = _L.lambda_dy
    pyramid_levels: int = _L.pyramid_levels
    lap_lambda0: float = _L.lap_lambda0
    lap_gamma: float = _L.lap_gamma
    ncc_window: int = _L.ncc_window
    ncc_stride: int = _L.ncc_stride

    # densification
    densify: bool = True
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    split_mode: str = _S.mode
    k_neighbors: int = _S.k_neighbors
    grad_threshold: float = _S.grad_threshold
    tau_base: float = _S.tau_base
    rho: float = _S.rho
    kappa: float = _S.kappa
    outlier_boost: bool = _S.outlier_boost
    min_opacity: float = _S.min_opacity
    prune_world_scale: float = _S.prune_world_scale
    prune_screen_frac: float = _S.prune_screen_frac
    child_opacity: str = _S.child_opacity
    max_gaussians: int = _S.max_gaussians

    # optimiser
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_color: float = 2.5e-3
    lr_dyn: float = 2.5e-3
    lr_hash: float = 1e-2
    lr_time: float = 1e-3
    lr_network: float = 8e-4
    lr_network_final: float = 1.6e-5
    adam_eps: float = 1e-15

    # initialisation
    init_points: str = "dataset"  # dataset | random
    init_random_count: int = 100

    # synthetic data
    synth_gaussians: int = 10
    synth_frames: int = 60
    synth_width: int = 64
    synth_height: int = 64
    synth_cameras: int = 4
    synth_test_every: int = 6
    synth_amplitude: float = 0.3
    synth_freqs: str = "1,2"
    synth_rotation: bool = True
    synth_scale_min: float = 0.08
    synth_scale_max: float = 0.16
    synth_points_per_gaussian: int = 4
    synth_static: bool = False
    synth_layout: str = "uniform"  # or "two_cluster"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.sigma_sq_source not in ("batch", "dataset", "auto"):
            raise ConfigError(f"unknown sigma_sq_source {self.sigma_sq_source!r}")
        if self.init_points not in ("dataset", "random"):
            raise ConfigError(f"unknown init_points {self.init_points!r}")
        if self.densify_interval < 1:
            raise ConfigError("densify_interval must be positive")
        if not 5 <= self.synth_gaussians <= 50 and not self.synth_gaussians == 1:
            raise ConfigError("synth_gaussians must be 1 or lie in [5, 50]")
        if self.synth_layout not in ("uniform", "two_cluster"):
            raise ConfigError(f"unknown synth_layout {self.synth_layout!r}")
        if max(self.synth_width, self.synth_height) > 128:
            raise ConfigError("synthetic resolution is capped at 128x128")
        try:
            self.grid_config()
            self.field_config()
            self.loss_weights()
            self.split_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def grid_config(self) -> GridConfig:
        return GridConfig(
            self.hash_levels, self.hash_features, self.hash_log2_table,
            self.hash_n_min, self.hash_n_max, self.hash_n_min_t, self.hash_n_max_t,
        )

    def field_config(self) -> FieldConfig:
        return FieldConfig(
            self.grid_config(), self.lap_k, self.lap_dim, self.dyn_dim,
            self.gate_hidden, self.trunk_width, self.trunk_depth, self.time_encoder,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            self.lambda_ssim, self.lambda_ncc, self.lambda_lap, self.lambda_dy,
            self.pyramid_levels, self.lap_lambda0, self.lap_gamma, self.ncc_window, self.ncc_stride,
        )

    def split_config(self) -> SplitConfig:
        return SplitConfig(
            self.split_mode, self.k_neighbors, self.grad_threshold, self.tau_base, self.rho,
            self.kappa, self.outlier_boost, self.min_opacity, self.prune_world_scale,
            self.prune_screen_frac, self.child_opacity, self.max_gaussians,
        )

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(known[key].type, val, key)
        return dataclasses.replace(base or cls(), **values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_text(f.read())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(typ, val: str, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None
