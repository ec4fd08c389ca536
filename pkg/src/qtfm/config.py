"""INI run configuration.

A run file has up to three sections — ``[model]``, ``[train]``, and ``[data]``
— whose keys are exactly the field names of :class:`~qtfm.model.ModelConfig`,
:class:`~qtfm.train.TrainConfig`, and :class:`~qtfm.data.SynthTaskSpec`.
Keys are case-sensitive; unknown sections or keys are rejected rather than
silently ignored. Values are coerced to the annotated field type, so typos
like ``d_model = big`` fail loudly. Missing sections and keys fall back to
the dataclass defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .data import SynthTaskSpec
from .errors import ContractError
from .model import ModelConfig
from .train import TrainConfig


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: SynthTaskSpec


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthTaskSpec}


def _coerce(section: str, key: str, raw: str, ftype: type):
    raw = raw.strip()
    try:
        if ftype is bool:
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError(f"expected true/false, got {raw!r}")
        if ftype is int:
            return int(raw, 10)
        if ftype is float:
            return float(raw)
        if ftype is str:
            return raw
    except ValueError as e:
        raise ContractError(f"[{section}] {key}: {e}") from e
    raise ContractError(f"[{section}] {key}: unsupported field type {ftype}")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ContractError(f"malformed config: {e}") from e

    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ContractError(f"unknown config sections: {sorted(unknown)}")

    built = {}
    for section, cls in _SECTIONS.items():
        field_types = {f.name: f.type for f in dataclasses.fields(cls)}
        # from __future__ annotations stores types as strings in some modules
        resolved = {n: ({"int": int, "float": float, "str": str, "bool": bool}[t]
                        if isinstance(t, str) else t)
                    for n, t in field_types.items()}
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in resolved:
                    raise ContractError(f"unknown key {key!r} in [{section}]; "
                                        f"valid keys: {sorted(resolved)}")
                kwargs[key] = _coerce(section, key, raw, resolved[key])
        built[section] = cls(**kwargs)
    return RunConfig(model=built["model"], train=built["train"], data=built["data"])


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(run: RunConfig) -> str:
    """Render a RunConfig as INI text (only fields that differ from defaults)."""
    lines = []
    for section, cls in _SECTIONS.items():
        obj = getattr(run, {"model": "model", "train": "train", "data": "data"}[section])
        defaults = cls()
        rows = []
        for f in dataclasses.fields(cls):
            value = getattr(obj, f.name)
            if value != getattr(defaults, f.name):
                rendered = ("true" if value else "false") if isinstance(value, bool) else str(value)
                rows.append(f"{f.name} = {rendered}")
        if rows:
            lines.append(f"[{section}]")
            lines.extend(rows)
            lines.append("")
    return "\n".join(lines)
