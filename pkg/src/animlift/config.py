"""Run configuration: one JSON document with dataset, ik, model, train and eval sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import DEFAULT_TEMPLATES, GenerationConfig, RigTemplate, derive_seed
from .errors import ConfigError
from .kinematics import IkConfig
from .metrics import Scenario
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("seed", "dataset", "ik", "model", "train", "eval", "paths")


@dataclass
class DatasetSection:
    templates: list = field(default_factory=lambda: [t.to_dict() for t in DEFAULT_TEMPLATES])
    sequences_per_category: int = 10
    frames: int = 48
    fps: float = 30.0
    noise_px: float = 3.0
    image_size: list = field(default_factory=lambda: [512, 512])
    margin: float = 0.05
    marker_radius: float = 0.02
    amplitude: float = 1.0
    train_fraction: float = 0.8
    seed: int | None = None  # None: derived from the root seed


@dataclass
class IkSection:
    smoothness_weight: float = 0.1
    learning_rate: float = 0.01
    max_iters: int = 500
    convergence_tol: float = 1e-7
    convergence_window: int = 50


@dataclass
class EvalSection:
    scenarios: list = field(default_factory=lambda: ["clean", "noisy", "occluded:0.1"])
    occlusion_sweep: list = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.6])
    clip_len: int | None = None  # None: lift whole sequences in one pass
    seed: int | None = None


@dataclass
class PathsSection:
    dataset: str | None = None
    out: str | None = None


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"section {name!r}: {e}") from None


@dataclass
class RunConfig:
    """Every field has a default, so ``{}`` is a valid config."""

    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    ik: IkSection = field(default_factory=IkSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "RunConfig":
        """Build from a parsed document; ``seed`` overrides the root seed.

        Model and training seeds not given explicitly are derived from the
        root seed, as are the dataset and eval seeds (lazily).
        """
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        seed = d.get("seed", 0) if seed is None else seed
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        model = dict(d.get("model") or {})
        model.setdefault("init_seed", derive_seed(seed, "model-init"))
        model.setdefault("rff_seed", derive_seed(seed, "rff"))
        train = dict(d.get("train") or {})
        train.setdefault("seed", derive_seed(seed, "train"))
        cfg = cls(
            seed=seed,
            dataset=_section(DatasetSection, d.get("dataset"), "dataset"),
            ik=_section(IkSection, d.get("ik"), "ik"),
            model=_section(ModelConfig, model, "model"),
            train=_section(TrainConfig, train, "train"),
            eval=_section(EvalSection, d.get("eval"), "eval"),
            paths=_section(PathsSection, d.get("paths"), "paths"),
        )
        for s in cfg.eval.scenarios:
            Scenario.parse(s)
        cfg.generation_config()  # validates templates
        return cfg

    @classmethod
    def load(cls, path, seed: int | None = None) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
        return cls.from_dict(doc, seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    # Effective sub-configs; unset seeds come from named streams of the root seed.

    def dataset_seed(self) -> int:
        return self.dataset.seed if self.dataset.seed is not None else derive_seed(self.seed, "dataset")

    def eval_seed(self) -> int:
        return self.eval.seed if self.eval.seed is not None else derive_seed(self.seed, "eval")

    def generation_config(self) -> GenerationConfig:
        ds = self.dataset
        try:
            templates = tuple(RigTemplate.from_dict(t) for t in ds.templates)
        except TypeError as e:
            raise ConfigError(f"bad template: {e}") from None
        ik = IkConfig(**asdict(self.ik))
        return GenerationConfig(
            templates=templates, sequences_per_category=ds.sequences_per_category, frames=ds.frames, fps=ds.fps,
            noise_px=ds.noise_px, image_size=tuple(ds.image_size), margin=ds.margin, marker_radius=ds.marker_radius,
            amplitude=ds.amplitude, train_fraction=ds.train_fraction, seed=self.dataset_seed(), ik=ik,
        )
