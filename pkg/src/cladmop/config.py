"""Run configuration: defaults, key=value config files, flag overrides.

Keys use dotted namespaces. Resolution order is defaults, then config file,
then command-line flags. The resolved mapping is hashed into every output
artifact so runs are attributable and reproducible.
"""

from __future__ import annotations

import os

from .checkpoint import config_hash

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "arch.d_dm": "16",
    "arch.num_heads": "8",
    "arch.d_mol": "64",
    "arch.enrich_layers": "4",
    "arch.grouping_layers": "3",
    "arch.self_layers": "2",
    "arch.final_centroids": "25",
    "arch.max_molecules": "16",
    "arch.head_hidden": "64",
    "encoder.kind": "toy",
    "encoder.d_llm": "32",
    "encoder.store": "",
    "data.icd_tree": "",
    "data.seg_dict": "",
    "pretrain.batch_size": "128",
    "pretrain.learning_rate": "1e-4",
    "pretrain.tau": "0.6",
    "pretrain.epochs": "50",
    "pretrain.val_fraction": "0.15",
    "finetune.head_lr": "1e-2",
    "finetune.lora_lr": "5e-2",
    "finetune.batch_size": "128",
    "finetune.epochs": "30",
    "finetune.val_fraction": "0.15",
    "finetune.lora_sites": "both",
    "finetune.lora_rank": "8",
    "eval.n_draws": "10",
    "eval.fraction": "0.8",
    "eval.threshold": "0.5",
    "bench.crit_lens": "128,256,512",
    "bench.n_mol": "3",
    "bench.n_dis": "2",
}

THREADS_ENV_VAR = "CLADMOP_THREADS"


class ConfigError(ValueError):
    pass


def load_config_file(path) -> dict[str, str]:
    """UTF-8 ``key=value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


class RunConfig:
    """Flat resolved configuration with typed accessors."""

    def __init__(self, values: dict[str, str]):
        unknown = set(values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        self.values = dict(DEFAULTS)
        self.values.update(values)

    @classmethod
    def resolve(cls, config_path=None, overrides: dict[str, str] | None = None
                ) -> "RunConfig":
        merged: dict[str, str] = {}
        if config_path:
            merged.update(load_config_file(config_path))
        for key, value in (overrides or {}).items():
            if value is not None:
                merged[key] = str(value)
        return cls(merged)

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return int(self.values[key])

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_int_list(self, key: str) -> list[int]:
        return [int(v) for v in self.values[key].split(",") if v]

    def hash_bytes(self) -> bytes:
        return config_hash(self.values)

    def hash_hex(self) -> str:
        return self.hash_bytes().hex()

    def as_lines(self) -> list[str]:
        return [f"{k}={self.values[k]}" for k in sorted(self.values)]


def max_threads() -> int:
    """Parallelism cap from the environment; 1 means fully serial."""
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
