"""Declarative run configuration: INI-style sections of key=value pairs.

Unknown sections or keys are rejected; every section a command touches must
carry an explicit seed (no wall-clock seeding). Validation reports every
offending key at once.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

REQUIRED = object()

# section -> key -> (parser, default) ; REQUIRED means the key must be present
# whenever a command uses that section.


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _csv_list(s: str) -> list[str]:
    return [item.strip() for item in s.split(",") if item.strip()]


def _float_list(s: str) -> list[float]:
    return [float(item) for item in _csv_list(s)]


SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "kind": (str, "fixture"),
        "classes": (_csv_list, ["SBRAD", "SR", "AFIB", "STACH", "AFLT", "SARRH", "SVTAC"]),
        "per_class": (int, 40),
        "fs": (float, 100.0),
        "seconds": (float, 10.0),
        "leads": (int, 2),
        "seed": (int, REQUIRED),
        "wfdb_dir": (_csv_list, []),
        "manifest": (_csv_list, []),
        "target_fs": (float, 100.0),
        "gain": (float, 1000.0),
    },
    "split": {
        "train": (float, 0.8),
        "val": (float, 0.1),
        "test": (float, 0.1),
        "seed": (int, REQUIRED),
    },
    "classifier": {
        "preset": (str, "desk"),
        "n_conv_blocks": (int, None),
        "n_kernels": (int, None),
        "kernel_len": (int, None),
        "n_neurons": (int, None),
        "n_dense_layers": (int, None),
        "lr": (float, None),
        "dropout": (float, None),
        "patience": (int, None),
        "min_delta": (float, None),
        "batch_size": (int, None),
        "max_epochs": (int, None),
        "seed": (int, REQUIRED),
    },
    "ddpm": {
        "backbone": (str, "dilated"),
        "t_steps": (int, 100),
        "channels": (int, 16),
        "n_layers": (int, 6),
        "n_levels": (int, 3),
        "n_blocks": (int, 2),
        "steps": (int, 600),
        "batch_size": (int, 16),
        "lr": (float, 2e-3),
        "seed": (int, REQUIRED),
    },
    "vqvae": {
        "n_fft": (int, 16),
        "hop": (int, 8),
        "codebook_size": (int, 64),
        "code_dim": (int, 32),
        "stage1_steps": (int, 500),
        "stage2_steps": (int, 400),
        "stage1_lr": (float, 2e-3),
        "stage2_lr": (float, 1e-3),
        "batch_size": (int, 16),
        "t_dec": (int, 8),
        "seed": (int, REQUIRED),
    },
    "flow": {
        "n_couplings": (int, 6),
        "hidden": (int, 64),
        "steps": (int, 300),
        "batch_size": (int, 8),
        "lr": (float, 1e-3),
        "seed": (int, REQUIRED),
    },
    "sample": {
        "per_class": (str, "match"),
        "seed": (int, REQUIRED),
    },
    "matrix": {
        "generators": (_csv_list, ["ddpm", "vqvae", "flow"]),
        "n_repeats": (int, 3),
        "resample": (_bool, False),
        "seed": (int, REQUIRED),
    },
    "transfer": {
        "generator": (str, "vqvae"),
        "fractions": (_float_list, [0.2, 0.4, 0.6, 0.8, 1.0]),
        "n_repeats": (int, 1),
        "lr_factor": (float, 0.1),
        "seed": (int, REQUIRED),
    },
    "metrics": {
        "pca_components": (int, 50),
        "seed": (int, REQUIRED),
    },
    "output": {
        "dir": (str, "runs/out"),
    },
}


@dataclass
class RunConfig:
    values: dict
    text: str  # resolved echo, written into every run folder

    def get(self, section: str, key: str):
        return self.values[section][key]

    def section(self, section: str) -> dict:
        return self.values[section]


def load_config(path, overrides: list[str] | None = None,
                used_sections: list[str] | None = None) -> RunConfig:
    """Parse, validate and resolve a config file.

    ``overrides`` are ``section.key=value`` strings. ``used_sections`` names
    the sections whose REQUIRED keys must be present for the invoked command.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"config parse failure: {exc}") from None

    raw: dict[str, dict[str, str]] = {s: dict(parser.items(s))
                                      for s in parser.sections()}
    for ov in overrides or []:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must be section.key=value, got {ov!r}")
        target, value = ov.split("=", 1)
        section, key = target.split(".", 1)
        raw.setdefault(section.strip(), {})[key.strip()] = value.strip()

    problems: list[str] = []
    for section in raw:
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
        else:
            for key in raw[section]:
                if key not in SCHEMA[section]:
                    problems.append(f"unknown key {section}.{key}")

    values: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, default) in keys.items():
            if section in raw and key in raw[section]:
                try:
                    values[section][key] = parse(raw[section][key])
                except (ValueError, TypeError) as exc:
                    problems.append(f"bad value for {section}.{key}: {exc}")
            elif default is REQUIRED:
                if used_sections is None or section in used_sections:
                    problems.append(f"missing required key {section}.{key}")
                values[section][key] = None
            else:
                values[section][key] = default

    if problems:
        raise ConfigError("configuration invalid:\n  " + "\n  ".join(sorted(problems)))

    lines = []
    for section in sorted(values):
        lines.append(f"[{section}]")
        for key in sorted(values[section]):
            val = values[section][key]
            if isinstance(val, list):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return RunConfig(values=values, text="\n".join(lines))
