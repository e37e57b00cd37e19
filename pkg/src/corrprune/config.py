"""Run configuration: one flat ``key = value`` file for every subcommand.

Keys are the fields of :class:`~corrprune.model.ModelConfig`,
:class:`~corrprune.model.TrainConfig` and
:class:`~corrprune.synthdata.SceneSpec` (without its per-scene ``seed``)
plus the run-level keys of :class:`RunOptions`.  Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import kvtext
from .exceptions import ConfigError
from .model import ModelConfig, TrainConfig
from .synthdata import SceneSpec


@dataclass(frozen=True)
class RunOptions:
    """Dataset sizes, paths and evaluation choices.

    ``data_dir`` empty means scenes are generated in memory from the scene
    keys; otherwise ``<data_dir>/<split>/*.corr`` files are read.
    """

    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    data_dir: str = ""
    run_dir: str = "run"
    checkpoint: str = ""
    split: str = "test"
    estimator: str = "weighted"
    eval_batch: int = 16

    def __post_init__(self):
        for key in ("n_train", "n_val", "n_test"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key=key)
        if self.split not in ("train", "val", "test"):
            raise ConfigError("split must be train, val or test", key="split")
        if self.estimator not in ("weighted", "ransac_post"):
            raise ConfigError("estimator must be weighted or ransac_post", key="estimator")
        if self.eval_batch < 1:
            raise ConfigError("eval_batch must be >= 1", key="eval_batch")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    run: RunOptions = field(default_factory=RunOptions)

    @property
    def seed(self):
        return self.train.seed

    def with_seed(self, seed):
        return replace(self, train=replace(self.train, seed=int(seed)))

    def split_seed(self, split):
        """Base seed of a data split; splits never share scenes."""
        return self.seed * 3 + ("train", "val", "test").index(split)

    def split_size(self, split):
        return getattr(self.run, "n_" + split)

    def dumps(self):
        return kvtext.dump(self.model, self.train, self.run) + _scene_text(self.scene)


def _scene_text(spec):
    lines = [f"{f.name} = {kvtext.format_value(getattr(spec, f.name))}"
             for f in fields(spec) if f.name != "seed"]
    return "\n".join(lines) + "\n"


def known_keys():
    keys = {}
    for section, cls in (("model", ModelConfig), ("train", TrainConfig),
                         ("scene", SceneSpec), ("run", RunOptions)):
        for f in fields(cls):
            if section == "scene" and f.name == "seed":
                continue
            keys[f.name] = section
    return keys


def parse(text, source="<config>") -> RunConfig:
    raw = kvtext.parse_lines(text, source)
    keys = known_keys()
    unknown = [k for k in raw if k not in keys]
    if unknown:
        raise ConfigError(f"{source}: unknown key {unknown[0]!r}", key=unknown[0])
    scene = kvtext.load_into(SceneSpec, raw, exclude=("seed",))
    try:
        scene.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}", key="scene") from None
    return RunConfig(kvtext.load_into(ModelConfig, raw), kvtext.load_into(TrainConfig, raw),
                     scene, kvtext.load_into(RunOptions, raw))


def load(path) -> RunConfig:
    path = Path(path)
    return parse(path.read_text(encoding="utf-8"), str(path))
