"""Experiment configuration: strict YAML parsing, validation, hashing.

One file describes a whole experiment in sections that mirror the package
modules. Parsing is fail-closed: an unknown key anywhere is a ConfigError,
because a silently ignored typo in a hyperparameter name is worse than a
crash. Derived objects (schedules, layouts, denoiser vocabularies) are
computed from the sections rather than stored, so the cross-model
consistency rules hold by construction and are re-checked in validate().
"""

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from codex3d.data_synth import PhantomSpec
from codex3d.denoiser import DenoiserConfig, SequenceLayout
from codex3d.diffusion import DiffusionSchedule, Stage2Hyper
from codex3d.errors import ConfigError
from codex3d.util import derive_seed, stable_hash
from codex3d.vqvae import AutoencoderConfig, Stage1Hyper


@dataclass
class DataSection:
    grid_size: int = 32
    primitive_count_range: tuple = (1, 4)
    density_levels: tuple = (0.25, 0.5, 0.75, 1.0)
    allowed_primitives: tuple = ("ellipsoid", "box", "tube", "shell")
    nesting_depth: int = 2
    azimuths: tuple = (0.0, 90.0)
    count: int = 2000
    heldout_count: int = 200
    misaligned: bool = False
    max_rotation_deg: float = 15.0
    max_translation_vox: float = 2.0
    projection_mode: str = "attenuation"
    mu: float = 0.1

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            grid_size=self.grid_size,
            primitive_count_range=tuple(self.primitive_count_range),
            density_levels=tuple(self.density_levels),
            allowed_primitives=tuple(self.allowed_primitives),
            nesting_depth=self.nesting_depth,
        ).validate()

    def validate(self):
        self.phantom_spec()
        if not self.azimuths:
            raise ConfigError("data.azimuths must be nonempty")
        if self.count < 1 or self.heldout_count < 0:
            raise ConfigError("data.count must be >= 1 and data.heldout_count >= 0")
        if self.projection_mode not in ("attenuation", "max"):
            raise ConfigError(f"data.projection_mode must be attenuation|max, got {self.projection_mode!r}")
        if self.max_rotation_deg < 0 or self.max_translation_vox < 0:
            raise ConfigError("misalignment bounds must be >= 0")
        return self


@dataclass
class VqvaeSection:
    downsample_factor: int = 4
    channels: int = 16
    codebook_K: int = 512
    codebook_D: int = 64
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    beta: float = 0.25
    log_interval: int = 50
    early_stop_mse: float | None = None

    def model_config(self, domain: str, input_size: int) -> AutoencoderConfig:
        return AutoencoderConfig(
            domain=domain,
            input_size=input_size,
            downsample_factor=self.downsample_factor,
            channels=self.channels,
            codebook_K=self.codebook_K,
            codebook_D=self.codebook_D,
        ).validate()

    def hyper(self, global_seed: int, domain: str) -> Stage1Hyper:
        return Stage1Hyper(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            beta=self.beta,
            log_interval=self.log_interval,
            seed=derive_seed("stage1", global_seed, domain),
            early_stop_mse=self.early_stop_mse,
        )


@dataclass
class DiffusionSection:
    T: int = 256
    layers: int = 8
    heads: int = 8
    model_dim: int = 256
    ffn_dim: int = 1024
    dropout: float = 0.0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    log_interval: int = 50
    checkpoint_interval: int = 0
    sample_steps: int = 64
    temperature: float = 1.0
    order: str = "random"

    def validate(self):
        if self.T < 1:
            raise ConfigError(f"diffusion.T must be >= 1, got {self.T}")
        if self.checkpoint_interval < 0:
            raise ConfigError("diffusion.checkpoint_interval must be >= 0")
        if self.order not in ("random", "confidence", "raster"):
            raise ConfigError(f"diffusion.order must be random|confidence|raster, got {self.order!r}")
        if self.temperature <= 0:
            raise ConfigError("diffusion.temperature must be > 0")
        return self

    def hyper(self, global_seed: int) -> Stage2Hyper:
        return Stage2Hyper(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            log_interval=self.log_interval,
            seed=derive_seed("stage2", global_seed),
        )


@dataclass
class MetricsSection:
    k: int = 5
    embed_dim: int = 512
    embed_seeds: tuple = (0, 1, 2, 3, 4)
    nll_mc: int = 16

    def validate(self):
        if self.k < 1:
            raise ConfigError("metrics.k must be >= 1")
        if self.embed_dim < 1:
            raise ConfigError("metrics.embed_dim must be >= 1")
        if not self.embed_seeds:
            raise ConfigError("metrics.embed_seeds must be nonempty")
        if self.nll_mc < 1:
            raise ConfigError("metrics.nll_mc must be >= 1")
        return self


_SECTION_TYPES = {
    "data": DataSection,
    "vqvae2d": VqvaeSection,
    "vqvae3d": VqvaeSection,
    "diffusion": DiffusionSection,
    "metrics": MetricsSection,
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    vqvae2d: VqvaeSection = field(default_factory=VqvaeSection)
    vqvae3d: VqvaeSection = field(default_factory=VqvaeSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    seed: int = 0

    # -- derived model objects -------------------------------------------

    def autoencoder_config(self, domain: str) -> AutoencoderConfig:
        if domain == "2d":
            return self.vqvae2d.model_config("2d", self.data.grid_size)
        if domain == "3d":
            return self.vqvae3d.model_config("3d", self.data.grid_size)
        raise ConfigError(f"domain must be '2d' or '3d', got {domain!r}")

    def stage1_hyper(self, domain: str) -> Stage1Hyper:
        section = {"2d": self.vqvae2d, "3d": self.vqvae3d}.get(domain)
        if section is None:
            raise ConfigError(f"domain must be '2d' or '3d', got {domain!r}")
        return section.hyper(self.seed, domain)

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(T=self.diffusion.T, mask_token=self.vqvae3d.codebook_K)

    def sequence_layout(self) -> SequenceLayout:
        return SequenceLayout.for_grids(
            self.autoencoder_config("2d").latent_shape,
            len(self.data.azimuths),
            self.autoencoder_config("3d").latent_shape,
        )

    def denoiser_config(self) -> DenoiserConfig:
        d = self.diffusion
        return DenoiserConfig(
            layers=d.layers,
            heads=d.heads,
            model_dim=d.model_dim,
            ffn_dim=d.ffn_dim,
            vocab_target=self.vqvae3d.codebook_K + 1,
            vocab_cond=self.vqvae2d.codebook_K,
            dropout=d.dropout,
        ).validate()

    def validate(self):
        self.data.validate()
        self.metrics.validate()
        self.diffusion.validate()
        self.autoencoder_config("2d")
        self.autoencoder_config("3d")
        layout = self.sequence_layout()
        layout.validate()
        config = self.denoiser_config()
        # cross-section consistency, restated as checks on the derived objects
        target_len = int(np.prod(self.autoencoder_config("3d").latent_shape))
        if layout.target_len != target_len:
            raise ConfigError(
                f"diffusion target length {layout.target_len} != 3D latent product {target_len}"
            )
        if config.vocab_cond != self.vqvae2d.codebook_K:
            raise ConfigError(
                f"condition vocabulary {config.vocab_cond} != 2D codebook {self.vqvae2d.codebook_K}"
            )
        if self.diffusion.sample_steps < 1 or self.diffusion.sample_steps > layout.target_len:
            raise ConfigError(
                f"diffusion.sample_steps must lie in [1, {layout.target_len}], "
                f"got {self.diffusion.sample_steps}"
            )
        return self

    # -- serialization ----------------------------------------------------

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                out[f.name] = {
                    sf.name: _plain(getattr(value, sf.name)) for sf in fields(value)
                }
            else:
                out[f.name] = _plain(value)
        return out

    @property
    def config_hash(self) -> str:
        return stable_hash(self.as_dict())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.as_dict(), sort_keys=True, default_flow_style=False)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def _coerce(value, target_example):
    if isinstance(target_example, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(target_example, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(target_example, float) and isinstance(value, int):
        return float(value)
    return value


def _build_section(cls, mapping, where: str):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in mapping.items():
        kwargs[name] = _coerce(value, getattr(defaults, name))
    return cls(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    """Parse YAML text into a validated ExperimentConfig (fail-closed)."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    allowed = set(_SECTION_TYPES) | {"seed"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            kwargs[name] = _build_section(cls, raw[name], name)
    if "seed" in raw:
        seed = raw["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        kwargs["seed"] = seed
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
