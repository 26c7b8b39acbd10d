"""Run configuration: flat INI-style sections of `key = value` text.

Unknown sections or keys are rejected. Serialization is canonical (fixed
section/key order, repr-exact floats), so parse -> serialize -> parse is a
fixed point and the serialized text has a stable digest.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

from .arch import ModelConfig
from .data import AugmentConfig, SyntheticSpec
from .optim import RangerConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "DEFAULT_CONFIG_TEXT"]


class ConfigError(ValueError):
    pass


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ",".join(f"{a}-{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in raw.split(",") if v.strip())


def _parse_pair_tuple(raw: str) -> tuple[tuple[int, int], ...]:
    # pairs like "0-1,2-3"
    pairs = []
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        a, b = chunk.split("-")
        pairs.append((int(a), int(b)))
    return tuple(pairs)


# schema: section -> key -> (type tag, default)
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("int", 0),
    },
    "model": {
        "input_size": ("int", 64),
        "stem_channels": ("int", 16),
        "stem_stride": ("int", 1),
        "k": ("int", 3),
        "growth": ("int", 16),
        "block_layers": ("int_tuple", (3, 3, 6)),
        "block_channels": ("int_tuple", (24, 32, 48)),
        "num_labels": ("int", 12),
        "dropout": ("float", 0.5),
        "cbam_reduction": ("int", 16),
        "dtype": ("str", "float64"),
    },
    "optim": {
        "lr": ("float", 0.01),
        "student_lr": ("float", 0.01),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.999),
        "eps": ("float", 1e-8),
        "weight_decay": ("float", 0.0),
        "lookahead_k": ("int", 6),
        "lookahead_alpha": ("float", 0.5),
        "focal_gamma": ("float", 2.0),
        "label_weighting": ("str", "inverse_frequency"),
        "weight_clip_lo": ("float", 0.5),
        "weight_clip_hi": ("float", 10.0),
    },
    "data": {
        "root": ("str", "data"),
        "augment_prob": ("float", 0.5),
        "rotate_deg": ("float", 15.0),
        "crop_area_lo": ("float", 0.6),
        "crop_area_hi": ("float", 1.0),
        "hu_lo": ("float", -1024.0),
        "hu_hi": ("float", 1024.0),
        "synthetic_labeled": ("int", 500),
        "synthetic_unlabeled": ("int", 5000),
        "synthetic_val": ("int", 400),
        "synthetic_test": ("int", 800),
        "synthetic_prior": ("float", 0.3),
        "exclusive_pairs": ("pair_tuple", ((0, 1), (2, 3))),
    },
    "semisup": {
        "iterations": ("int", 5),
        "batch": ("int", 8),
        "teacher_epochs": ("int", 10),
        "teacher_batch": ("int", 16),
        "student_steps": ("int", 400),
        "eval_batch": ("int", 16),
    },
    "attribution": {
        "steps": ("int", 50),
        "mask_fraction": ("float", 0.25),
    },
}

_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "int_tuple": _parse_int_tuple,
    "pair_tuple": _parse_pair_tuple,
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]
    config_dir: Path

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    # typed views --------------------------------------------------------
    def model_config(self) -> ModelConfig:
        m = self.values["model"]
        if m["dtype"] not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32/float64, got {m['dtype']!r}")
        return ModelConfig(
            input_size=m["input_size"],
            stem_channels=m["stem_channels"],
            stem_stride=m["stem_stride"],
            k=m["k"],
            growth=m["growth"],
            block_layers=tuple(m["block_layers"]),
            block_channels=tuple(m["block_channels"]),
            num_labels=m["num_labels"],
            dropout=m["dropout"],
            cbam_reduction=m["cbam_reduction"],
            dtype=m["dtype"],
        )

    def ranger_config(self, student: bool = False) -> RangerConfig:
        o = self.values["optim"]
        return RangerConfig(
            lr=o["student_lr"] if student else o["lr"],
            betas=(o["beta1"], o["beta2"]),
            eps=o["eps"],
            weight_decay=o["weight_decay"],
            lookahead_k=o["lookahead_k"],
            lookahead_alpha=o["lookahead_alpha"],
        )

    def augment_config(self) -> AugmentConfig:
        d = self.values["data"]
        return AugmentConfig(
            prob=d["augment_prob"],
            rotate_deg=d["rotate_deg"],
            crop_area=(d["crop_area_lo"], d["crop_area_hi"]),
        )

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.values["data"]
        return SyntheticSpec(
            num_labeled=d["synthetic_labeled"],
            num_unlabeled=d["synthetic_unlabeled"],
            num_val=d["synthetic_val"],
            num_test=d["synthetic_test"],
            num_labels=self.values["model"]["num_labels"],
            image_size=self.values["model"]["input_size"],
            prior=d["synthetic_prior"],
            exclusive_pairs=tuple(d["exclusive_pairs"]),
        )

    def data_root(self) -> Path:
        root = Path(self.values["data"]["root"])
        if not root.is_absolute():
            root = self.config_dir / root
        return root

    # canonical form -------------------------------------------------------
    def serialize(self) -> str:
        out = io.StringIO()
        for section, keys in _SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_fmt(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def section_text(self, section: str) -> str:
        lines = [f"[{section}]"]
        for key in _SCHEMA[section]:
            lines.append(f"{key} = {_fmt(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def model_digest(self) -> str:
        return hashlib.sha256(self.section_text("model").encode("utf-8")).hexdigest()


def parse_config(text: str, config_dir: Path | str = ".") -> RunConfig:
    parser = configparser.ConfigParser(
        delimiters=("=",), interpolation=None, strict=True
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from e

    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, (tag, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[section][key] = _PARSERS[tag](raw)
                except ValueError as e:
                    raise ConfigError(
                        f"bad value for {section}.{key}: {raw!r} ({e})"
                    ) from e
            else:
                values[section][key] = default
    return RunConfig(values=values, config_dir=Path(config_dir).resolve())


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), config_dir=path.parent)


DEFAULT_CONFIG_TEXT = parse_config("").serialize()
