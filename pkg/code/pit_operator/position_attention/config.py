"""
Flat ``key = value`` run configuration covering the model,
the optimizer and the task generator.
"""

import logging
import typing
from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Tuple

from ._shared.errors import ConfigError
from ._shared.seeds import LATENT_SAMPLING, derive_seed
from ._shared.types import PathLike
from .container import Checkpoint, read_checkpoint
from .datasets import DARCY, TaskConfig, TaskSplit, make_task
from .geometry import Mesh, build_latent_mesh
from .model import PiTConfig, PiTModel, build
from .training import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = ("pit", "train", "task")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(key: str, text: str, annotation, line: Optional[int]):
    text = text.strip()
    optional = typing.get_origin(annotation) is typing.Union
    if optional:
        if text.lower() == "none":
            return None
        annotation = [a for a in typing.get_args(annotation) if a is not type(None)][0]

    try:
        if annotation is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            if not text:
                raise ValueError(text)
            return text
        if typing.get_origin(annotation) is tuple:
            parts = text.replace("x", ",").split(",")
            return tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise ConfigError(key, f"invalid value {text!r}", line) from None
    raise ConfigError(key, f"unsupported field type {annotation}", line)


@dataclass
class RunConfig:
    """
    Everything a run needs. Keys are the field names of
    PiTConfig, TrainConfig and TaskConfig, which are disjoint.
    """

    pit: PiTConfig = field(default_factory=PiTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    @property
    def seed(self) -> int:
        """Run seed"""
        return self.train.seed

    @staticmethod
    def key_types() -> Dict[str, Tuple[str, object]]:
        """Section and annotation of every canonical key"""
        out = {}
        for section, cls in zip(SECTIONS, (PiTConfig, TrainConfig, TaskConfig)):
            hints = typing.get_type_hints(cls)
            for f in fields(cls):
                out[f.name] = (section, hints[f.name])
        return out

    def validate(self, lines: Optional[Dict[str, int]] = None):
        """
        Validates every section and their consistency.

        Raises
        ------
        ConfigError
            With the key name and, when known, the line.
        """
        lines = lines or {}
        try:
            self.pit.validate()
            self.train.validate()
            self.task.validate()
            space_dim = 2 if self.task.task == DARCY else 1
            if self.pit.space_dim != space_dim:
                raise ConfigError(
                    "space_dim", f"task {self.task.task} lives in {space_dim} dimension(s)"
                )
            if self.pit.input_channels != 1 or self.pit.output_channels != 1:
                raise ConfigError("input_channels", "synthetic tasks have one input/output channel")
        except ConfigError as e:
            if e.line is None and e.key in lines:
                raise ConfigError(e.key, e.message, lines[e.key]) from None
            raise

    def to_text(self) -> str:
        """Canonical text, one ``key = value`` per line"""
        out = []
        for section in SECTIONS:
            out.append(f"# {section}")
            obj = getattr(self, section)
            for f in fields(obj):
                out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str, validate: bool = True) -> "RunConfig":
        """
        Parses run-config text. Missing keys keep their defaults.

        Raises
        ------
        ConfigError
            On unknown or duplicated keys, malformed lines and
            invalid values.
        """
        key_types = cls.key_types()
        values = {section: {} for section in SECTIONS}
        lines = {}

        for number, raw in enumerate(text.splitlines(), start=1):
            content = raw.split("#", 1)[0].strip()
            if not content:
                continue
            if "=" not in content:
                raise ConfigError(content, "expected 'key = value'", number)
            key, value = (part.strip() for part in content.split("=", 1))
            if key not in key_types:
                raise ConfigError(key, "unknown key", number)
            if key in lines:
                raise ConfigError(key, f"duplicated, first set on line {lines[key]}", number)
            section, annotation = key_types[key]
            values[section][key] = _parse(key, value, annotation, number)
            lines[key] = number

        run = cls(
            pit=PiTConfig(**values["pit"]),
            train=TrainConfig(**values["train"]),
            task=TaskConfig(**values["task"]),
        )
        if validate:
            run.validate(lines)
        return run

    @classmethod
    def from_file(cls, path: PathLike, validate: bool = True) -> "RunConfig":
        """Parses a UTF-8 run-config file"""
        with open(path, "r", encoding="utf-8") as fp:
            return cls.from_text(fp.read(), validate=validate)


def latent_mesh_for(run: RunConfig, input_mesh: Mesh) -> Mesh:
    """Latent mesh of a run built from the input mesh"""
    seed = int(derive_seed(run.seed, LATENT_SAMPLING).generate_state(1)[0])
    return build_latent_mesh(input_mesh, run.pit.latent_resolution, seed=seed)


def build_run(run: RunConfig) -> Tuple[TaskSplit, PiTModel]:
    """Generates the task data and the initialized model of a run"""
    run.validate()
    split = make_task(run.task, seed=run.seed)
    latent = latent_mesh_for(run, split.train.input_mesh)
    return split, build(run.pit, latent, seed=run.seed)


def restore_model(checkpoint: Checkpoint) -> Tuple[PiTModel, RunConfig]:
    """Rebuilds the model stored in a checkpoint"""
    run = RunConfig.from_text(checkpoint.config_text)
    model = build(run.pit, checkpoint.latent_mesh, seed=run.seed)
    model.load_state_dict(checkpoint.state)
    return model, run


def load_model(path: PathLike) -> Tuple[PiTModel, RunConfig]:
    """Reads a checkpoint file and rebuilds its model"""
    return restore_model(read_checkpoint(path))
