"""Key-value configuration files.

One ``key = value`` per line, ``#`` comments, no sections. Lists are
comma-separated. Examples::

    # train.conf
    qubit_count = 5
    n_layers = 1
    class_labels = 0, 1
    dataset = synthetic:bars:16

    # fleet.conf
    heartbeat_period = 5
    worker.w1 = 5
    worker.w2 = 10
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .errors import ConfigError
from .trainer import TrainConfig

_SECTION = "config"


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        strict=True, interpolation=None,
    )
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if parser.sections() != [_SECTION]:
        raise ConfigError(f"{source}: sections are not supported")
    return dict(parser[_SECTION])


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"), str(path))


def _coerce(value: str, kind):
    if kind is bool:
        lowered = value.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return lowered in ("true", "1", "yes")
    if kind == "labels":
        return tuple(int(v) for v in value.split(",") if v.strip())
    if kind == "optional_int":
        return None if value.lower() in ("", "none") else int(value)
    return kind(value)


_TRAIN_TYPES = {
    "alpha": float, "epochs": int, "stride": int, "width": int, "n_filters": int,
    "n_layers": int, "qubit_count": int, "shots": "optional_int", "seed": int,
    "class_labels": "labels", "in_flight": int, "retries": int, "train_dense": bool,
    "client_id": str,
}
# keys outside TrainConfig that a train config may carry
TRAIN_EXTRAS = {"dataset": str, "max_samples": "optional_int", "metrics": str, "manager": str}


def train_config_from_kv(kv: dict[str, str]) -> tuple[TrainConfig, dict]:
    fields, extras = {}, {}
    for key, value in kv.items():
        kind = _TRAIN_TYPES.get(key) or TRAIN_EXTRAS.get(key)
        if kind is None:
            raise ConfigError(f"unknown train config key {key!r}")
        try:
            coerced = _coerce(value, kind)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        (fields if key in _TRAIN_TYPES else extras)[key] = coerced
    try:
        return TrainConfig(**fields), extras
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_train_config(path) -> tuple[TrainConfig, dict]:
    return train_config_from_kv(read_kv(path))


def train_config_to_kv(config: TrainConfig, extras: dict | None = None) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if value is None:
            continue
        if f.name == "class_labels":
            value = ", ".join(map(str, value))
        lines.append(f"{f.name} = {value}")
    for key, value in (extras or {}).items():
        if value is not None:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_fleet(kv: dict[str, str]) -> tuple[list[tuple[str, int]], dict]:
    workers, other = [], {}
    for key, value in kv.items():
        if key.startswith("worker."):
            try:
                workers.append((key[len("worker."):], int(value)))
            except ValueError:
                raise ConfigError(f"{key}: MR must be an integer") from None
        else:
            other[key] = value
    return workers, other


def load_fleet_config(path) -> tuple[list[tuple[str, int]], dict]:
    return parse_fleet(read_kv(path))


def parse_fleet_list(text: str) -> list[tuple[str, int]]:
    """``w1:5, w2:10`` -> [("w1", 5), ("w2", 10)]."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        wid, _, mr = item.partition(":")
        try:
            out.append((wid.strip(), int(mr)))
        except ValueError:
            raise ConfigError(f"bad fleet entry {item!r}; expected id:max_qubits") from None
    return out
