"""Flat key/value run configuration with strict parsing.

Config files are plain text: one ``key = value`` per line, ``#`` comments.
Unknown keys are rejected, every field has a default, and the effective
configuration is echoed into the output directory so a run can be reproduced
from its artifacts alone. Relative paths are resolved against the directory
containing the config file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .model import ALL_DIRECTIONS, ModelConfig
from .tensor import ConfigError
from .training import Schedule

PATH_FIELDS = ("aspect_train", "aspect_test", "documents",
               "general_embeddings", "domain_embeddings", "out_dir")


@dataclass
class RunConfig:
    # corpora and artifacts
    aspect_train: str = ""
    aspect_test: str = ""
    documents: str = ""
    general_embeddings: str = ""
    domain_embeddings: str = ""
    out_dir: str = "out"
    # model dimensions
    d_general: int = 50
    d_domain: int = 30
    d_enc: int = 64
    d_task: int = 64
    d_route: int = 32
    kernel_widths: tuple[int, ...] = (3, 5)
    task_depth: int = 2
    nonlinearity: str = "relu"
    dropout: float = 0.1
    iterations: int = 2
    route_iters: int = 3
    max_len: int = 128
    pe_mode: str = "add-both"
    train_embeddings: bool = True
    # knowledge paths
    route_ate_to_ote: bool = True
    route_ate_to_asc: bool = True
    route_ote_to_ate: bool = True
    route_ote_to_asc: bool = True
    route_asc_to_ate: bool = True
    route_asc_to_ote: bool = True
    inject_ddc: bool = True
    inject_dsc: bool = True
    coarse: bool = False
    # loss weights
    lambda_ate: float = 1.0
    lambda_ote: float = 1.0
    lambda_asc: float = 1.0
    lambda_ddc: float = 1.0
    lambda_dsc: float = 1.0
    # optimization schedule
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    pretrain_epochs: int = 2
    aspect_batches_per_doc: int = 1
    patience: int = 10
    clip_norm: float = 5.0
    dev_fraction: float = 0.2
    target_token_acc: float = 0.0
    # run control
    seed: int = 1
    runs: int = 1

    def model_config(self) -> ModelConfig:
        transfers = tuple(
            d for d in ALL_DIRECTIONS
            if getattr(self, f"route_{d.replace('->', '_to_')}"))
        return ModelConfig(
            d_general=self.d_general, d_domain=self.d_domain,
            d_enc=self.d_enc, d_task=self.d_task, d_route=self.d_route,
            kernel_widths=self.kernel_widths, task_depth=self.task_depth,
            nonlinearity=self.nonlinearity, dropout=self.dropout,
            iterations=self.iterations, route_iters=self.route_iters,
            max_len=self.max_len, pe_mode=self.pe_mode, transfers=transfers,
            inject_ddc=self.inject_ddc, inject_dsc=self.inject_dsc,
            coarse=self.coarse, train_embeddings=self.train_embeddings,
            lambda_ate=self.lambda_ate, lambda_ote=self.lambda_ote,
            lambda_asc=self.lambda_asc, lambda_ddc=self.lambda_ddc,
            lambda_dsc=self.lambda_dsc, seed=self.seed)

    def schedule(self) -> Schedule:
        return Schedule(epochs=self.epochs,
                        pretrain_epochs=self.pretrain_epochs,
                        aspect_batches_per_doc=self.aspect_batches_per_doc,
                        batch_size=self.batch_size, lr=self.lr,
                        clip_norm=self.clip_norm, patience=self.patience,
                        target_token_acc=self.target_token_acc)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    if f.type in ("str", str):
        return raw
    if f.type in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}")
    if f.type in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}")
    if f.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected true/false, got {raw!r}")
    # tuple[int, ...] (kernel widths)
    try:
        return tuple(int(p) for p in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, "
                          f"got {raw!r}")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, val)
    for key in PATH_FIELDS:
        if values.get(key):
            values[key] = os.path.normpath(
                os.path.join(base_dir, values[key]))
    return RunConfig(**values)


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), base_dir=os.path.dirname(
            os.path.abspath(path)))


def apply_overrides(rc: RunConfig, overrides: list[str]) -> RunConfig:
    changes: dict = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, "
                              f"got {item!r}")
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse_value(key, val)
    return dataclasses.replace(rc, **changes)


def format_config(rc: RunConfig) -> str:
    lines = ["# effective configuration"]
    for f in dataclasses.fields(RunConfig):
        lines.append(f"{f.name} = {_format_value(getattr(rc, f.name))}")
    return "\n".join(lines) + "\n"


def echo_config(rc: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective.cfg")
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(rc))
    return path
