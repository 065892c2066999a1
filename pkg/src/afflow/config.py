"""Textual run configuration: ``section.key = value`` lines, strict keys.

File values override defaults; CLI flags override file values. Every run
writes its fully resolved configuration next to its outputs.
"""

from __future__ import annotations

from pathlib import Path

from .dataset import SimConfig
from .flow import FlowConfig
from .model import ModelConfig
from .training import TrainConfig

RESOLVED_NAME = "resolved.cfg"


class ConfigError(ValueError):
    pass


def _parse_phi0(raw: str):
    if raw == "random":
        return "random"
    return float(raw)


_SCHEMA = {
    "sim.kind": (str, "sinusoidal-respiratory"),
    "sim.amplitude_min": (float, 0.5),
    "sim.amplitude_max": (float, 2.0),
    "sim.period": (float, 16.0),
    "sim.phi0": (_parse_phi0, "random"),
    "sim.fraction": (float, 0.6),
    "sim.side": (int, 64),
    "sim.count": (int, 8),
    "sim.variants": (int, 1),
    "sim.seed": (int, 0),
    "flow.levels": (int, 3),
    "flow.steps": (int, 12),
    "flow.lambda0": (float, 0.2),
    "flow.decay_a": (float, 1.0),
    "flow.hidden": (int, 64),
    "flow.eps_inv": (float, 0.05),
    "ace.blocks": (int, 4),
    "ace.features": (int, 16),
    "train.lr": (float, 1e-4),
    "train.beta1": (float, 0.5),
    "train.beta2": (float, 0.999),
    "train.batch": (int, 8),
    "train.iters": (int, 2000),
    "train.eval_interval": (int, 500),
    "train.seed": (int, 0),
    "restore.tau": (float, 0.0),
    "restore.seed": (int, 0),
}


class RunConfig:
    def __init__(self):
        self.values = {key: default for key, (_, default) in _SCHEMA.items()}

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
            key, _, raw = stripped.partition("=")
            cfg.set(key.strip(), raw.strip())
        return cfg

    def set(self, key: str, raw):
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        parser = _SCHEMA[key][0]
        try:
            self.values[key] = parser(str(raw))
        except ValueError as err:
            raise ConfigError(f"bad value for '{key}': {err}") from None

    def get(self, key: str):
        return self.values[key]

    def resolved_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            rendered = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / RESOLVED_NAME).write_text(self.resolved_text())

    # typed views

    def sim_config(self) -> SimConfig:
        phi0 = self.values["sim.phi0"]
        return SimConfig(
            kind=self.values["sim.kind"],
            amplitude_min=self.values["sim.amplitude_min"],
            amplitude_max=self.values["sim.amplitude_max"],
            period=self.values["sim.period"],
            phi0=None if phi0 == "random" else float(phi0),
            fraction=self.values["sim.fraction"],
            side=self.values["sim.side"],
            variants=self.values["sim.variants"],
            seed=self.values["sim.seed"],
        )

    def flow_config(self) -> FlowConfig:
        return FlowConfig(
            levels=self.values["flow.levels"],
            steps=self.values["flow.steps"],
            lambda0=self.values["flow.lambda0"],
            decay_a=self.values["flow.decay_a"],
            hidden=self.values["flow.hidden"],
            eps_inv=self.values["flow.eps_inv"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.values["train.lr"],
            beta1=self.values["train.beta1"],
            beta2=self.values["train.beta2"],
            batch=self.values["train.batch"],
            iters=self.values["train.iters"],
            eval_interval=self.values["train.eval_interval"],
            seed=self.values["train.seed"],
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            flow=self.flow_config(),
            ace_features=self.values["ace.features"],
            ace_blocks=self.values["ace.blocks"],
            in_channels=1,
            init_seed=self.values["train.seed"],
        )
