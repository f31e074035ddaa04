"""Run configuration: one YAML document per run.

Unknown keys are errors.  Every error names the offending key and, when the
value came from a file, its line.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .data import SyntheticSpec, TransformConfig
from .errors import ConfigError
from .jigsaw import granularity_schedule
from .model import ArchConfig
from .trainer import TrainingConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "PMG_OUTPUT_ROOT"


@dataclass
class SyntheticSection:
    num_classes: int = 8
    image_size: int = 64
    samples_per_class: int = 16
    test_samples_per_class: int = 16
    texture_patch_size: int = 16
    texture_cell: int = 1
    seed: int = 0


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | folder
    train_root: Optional[str] = None
    val_root: Optional[str] = None
    resize: int = 80
    crop: int = 64
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    @property
    def transform(self) -> TransformConfig:
        return TransformConfig(self.resize, self.crop)

    def synthetic_spec(self, max_n: int = 8) -> SyntheticSpec:
        s = self.synthetic
        return SyntheticSpec(
            num_classes=s.num_classes,
            image_size=s.image_size,
            samples_per_class=s.samples_per_class,
            texture_patch_size=s.texture_patch_size,
            texture_cell=s.texture_cell,
            seed=s.seed,
            max_n=max_n,
            crop_margin=(self.resize - self.crop) / self.resize,
        )


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    run_seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"]["channels"] = list(d["arch"]["channels"])
        d["training"].pop("run_seed")
        return d

    @property
    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    @property
    def max_n(self) -> int:
        return max(e.n for e in granularity_schedule(self.arch.num_stages, self.arch.supervised_stages, self.training.n_schedule))


# fields that exist on the dataclasses but are not accepted from files
_DERIVED = {("training", "run_seed")}


# -- loading ------------------------------------------------------------------


def _node_to_python(node, path: tuple, lines: dict):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigError(f"duplicate key {'.'.join(path + (key,))}", k.start_mark.line + 1)
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _node_to_python(v, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_node_to_python(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def read_config_tree(path: Union[str, Path]) -> tuple[dict, dict]:
    """Parse a YAML config into ``(tree, lines)``; ``lines`` maps key paths to lines."""
    text = Path(path).read_text()
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{path}: invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from exc
    lines: dict = {}
    tree = _node_to_python(node, (), lines) if node is not None else {}
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping", 1)
    return tree, lines


def _check_type(value, default, key: str, line):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, (tuple, list)):
        ok = isinstance(value, list)
        value = tuple(value) if ok and isinstance(default, tuple) else value
    elif isinstance(default, str):
        # n_schedule may be a string or a list
        ok = isinstance(value, str) or (key.endswith("n_schedule") and isinstance(value, list))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}", line)
    return value


def _build(cls, tree: dict, path: tuple, lines: dict):
    if not isinstance(tree, dict):
        raise ConfigError(f"{'.'.join(path)} must be a mapping", lines.get(path))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    instance = cls()
    for key, value in tree.items():
        key_path = path + (key,)
        dotted = ".".join(str(p) for p in key_path)
        if key not in fields or key_path in _DERIVED:
            known = sorted(k for k in fields if path + (k,) not in _DERIVED)
            raise ConfigError(f"unknown key {dotted!r} (allowed: {', '.join(known)})", lines.get(key_path))
        current = getattr(instance, key)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value, key_path, lines)
        else:
            value = _check_type(value, current, dotted, lines.get(key_path))
        setattr(instance, key, value)
    return instance


def set_dotted(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def load_config(
    source: Union[str, Path, dict], overrides: Optional[dict] = None, lines: Optional[dict] = None
) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a file or a tree.

    ``overrides`` maps dotted keys (``"training.alpha"``) to values and is
    applied before validation.
    """
    if isinstance(source, dict):
        tree, lines = copy.deepcopy(source), dict(lines or {})
    else:
        tree, lines = read_config_tree(source)
    for dotted, value in (overrides or {}).items():
        set_dotted(tree, dotted, value)
        lines.setdefault(tuple(dotted.split(".")), None)  # marks the key as explicitly given
    version = tree.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})", lines.get(("schema_version",)))
    cfg = _build(RunConfig, tree, (), lines)
    cfg.training.run_seed = cfg.run_seed
    validate_config(cfg, lines)
    return cfg


def validate_config(cfg: RunConfig, lines: Optional[dict] = None) -> None:
    lines = lines or {}

    def fail(msg, *path):
        raise ConfigError(msg, lines.get(tuple(path)))

    ds, arch, tr = cfg.dataset, cfg.arch, cfg.training
    if ds.kind not in ("synthetic", "folder"):
        fail(f"dataset.kind must be 'synthetic' or 'folder', got {ds.kind!r}", "dataset", "kind")
    if ds.kind == "folder" and not ds.train_root:
        fail("dataset.train_root is required for folder datasets", "dataset", "kind")
    if ds.kind == "synthetic":
        k = ds.synthetic.num_classes
        if "num_classes" in _section_keys(lines, "arch") and arch.num_classes != k:
            fail(f"arch.num_classes={arch.num_classes} disagrees with dataset.synthetic.num_classes={k}", "arch", "num_classes")
        arch.num_classes = k
    if not 1 <= arch.supervised_stages <= arch.num_stages:
        fail(
            f"arch.supervised_stages S={arch.supervised_stages} must satisfy 1 <= S <= L={arch.num_stages}",
            "arch", "supervised_stages",
        )
    for section, key, check in (("arch", None, arch.validate), ("training", None, lambda: tr.validate(arch.num_stages, arch.supervised_stages))):
        try:
            check()
        except ConfigError as exc:
            raise ConfigError(str(exc), lines.get((section,))) from None
    if ds.crop > ds.resize:
        fail(f"dataset.crop={ds.crop} exceeds dataset.resize={ds.resize}", "dataset", "crop")
    max_n = cfg.max_n
    if ds.crop % max_n:
        fail(f"dataset.crop={ds.crop} is not divisible by the largest n={max_n}", "dataset", "crop")
    if arch.backbone == "desk" and ds.crop % (2**arch.num_stages):
        fail(f"dataset.crop={ds.crop} is not divisible by 2^L={2 ** arch.num_stages}", "dataset", "crop")
    if ds.kind == "synthetic" and ds.synthetic.image_size % max_n:
        fail(f"dataset.synthetic.image_size is not divisible by the largest n={max_n}", "dataset", "synthetic", "image_size")


def _section_keys(lines: dict, section: str) -> set:
    return {p[1] for p in lines if len(p) == 2 and p[0] == section}


def dump_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
