"""Run configuration: ``key = value`` files, flag overrides and ``LISER_SEED``."""
from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .data import DataError
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration (usage error)."""


PATH_KEYS = ("labeled_manifest", "unlabeled_manifest", "teacher_file", "output_dir")
RUN_KEYS = {"threads": int, "grid_search": bool, "video_classes": int}
TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


@dataclass
class RunConfig:
    train: TrainConfig
    labeled_manifest: Path | None = None
    unlabeled_manifest: Path | None = None
    teacher_file: Path | None = None
    output_dir: Path | None = None
    threads: int | None = None  # None: all available cores
    grid_search: bool = True
    video_classes: int | None = None

    def to_dict(self) -> dict:
        d = self.train.to_dict()
        for k in PATH_KEYS:
            v = getattr(self, k)
            d[k] = str(v) if v is not None else None
        d.update(threads=self.threads, grid_search=self.grid_search, video_classes=self.video_classes)
        return d

    def validate_paths(self) -> None:
        if self.labeled_manifest is None:
            raise DataError("missing input: labeled_manifest")
        needed = [("labeled_manifest", self.labeled_manifest)]
        if self.train.uses_teachers:
            if self.unlabeled_manifest is None:
                raise DataError(f"missing input: unlabeled_manifest (required by {self.train.configuration})")
            if self.teacher_file is None:
                raise DataError(f"missing input: teacher_file (required by {self.train.configuration})")
            needed += [("unlabeled_manifest", self.unlabeled_manifest), ("teacher_file", self.teacher_file)]
        for key, p in needed:
            if not Path(p).is_file():
                raise DataError(f"missing input: {key} {p} does not exist")


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(key: str, value):
    if isinstance(value, list):
        return tuple(value)
    if not isinstance(value, str):
        return value
    if key in TRAIN_FIELDS:
        default = TRAIN_FIELDS[key].default
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(x) for x in value.replace("{", "").replace("}", "").split(",") if x.strip())
        return value.strip()
    if key in RUN_KEYS:
        kind = RUN_KEYS[key]
        return _parse_bool(value) if kind is bool else kind(value)
    return value.strip()


def read_config_file(path) -> dict:
    """Flat dict of raw values. ``.json`` files are read as a previous ``run.json``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    if path.suffix == ".json":
        raw = json.loads(path.read_text(encoding="utf-8"))
        return dict(raw.get("config", raw))
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None,
                                       delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + path.read_text(encoding="utf-8"))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    raw = {}
    for section in parser.sections():
        raw.update(parser[section])
    base = path.parent
    for k in PATH_KEYS:
        if raw.get(k) and not Path(raw[k]).is_absolute():
            raw[k] = str((base / raw[k]).resolve())
    return raw


def build_run_config(raw: dict | None = None, overrides: dict | None = None,
                     env: dict | None = None) -> RunConfig:
    """Merge file values < ``LISER_SEED`` < explicit flag overrides."""
    env = os.environ if env is None else env
    merged = dict(raw or {})
    if env.get("LISER_SEED"):
        merged["seed"] = env["LISER_SEED"]
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(merged) - set(TRAIN_FIELDS) - set(PATH_KEYS) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
    try:
        values = {k: _coerce(k, v) for k, v in merged.items() if v is not None}
        train = TrainConfig(**{k: v for k, v in values.items() if k in TRAIN_FIELDS})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    run = RunConfig(train)
    for k in PATH_KEYS:
        if values.get(k):
            setattr(run, k, Path(values[k]))
    for k in RUN_KEYS:
        if k in values:
            setattr(run, k, values[k])
    return run
