"""Run configuration: typed fields, defaults, and a flat ``key = value`` file format.

Values are JSON literals, one key per line; ``#`` starts a comment line.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from unfoldldm.errors import ConfigError

ABLATIONS = ("no_x_hat", "no_x_tilde", "no_seqmix", "no_isda", "no_dra", "no_pdr", "no_drldm")

PATH_ENV = {
    "data_dir": "UNFOLDLDM_DATA_DIR",
    "out_dir": "UNFOLDLDM_OUT_DIR",
}


def _default_menu():
    return [
        {"kind": "gaussian_blur", "sigma": 1.5, "noise_sigma": 0.05},
    ]


@dataclass
class RunConfig:
    # unfolding / prior sizes
    K: int = 3
    T: int = 3
    cp: int = 64
    zeta1: float = 1.0
    zeta2: float = 1.0
    zeta3: float = 1.0
    betas: list = field(default_factory=lambda: [0.30, 0.60, 0.90])
    # optimization
    lr: float = 2e-4
    lr_min: float = 1e-6
    steps1: int = 1000
    steps2: int = 1000
    batch_size: int = 8
    rollout_every: int = 50
    # network widths
    blocks: list = field(default_factory=lambda: [2, 2, 2, 2])
    base_width: int = 16
    mix_hidden: int = 16
    mixer_init_scale: float = 0.1
    pi_width: int = 32
    pi_hidden: int = 128
    denoiser_hidden: int = 256
    beta0: float = 0.5
    gamma0: float = 0.5
    zero_init_outputs: bool = True
    # data
    channels: int = 1
    image_size: int = 32
    n_train: int = 200
    n_test: int = 50
    degradations: list = field(default_factory=_default_menu)
    seed: int = 0
    precision: str = "float32"
    # ablation switches
    no_x_hat: bool = False
    no_x_tilde: bool = False
    no_seqmix: bool = False
    no_isda: bool = False
    no_dra: bool = False
    no_pdr: bool = False
    no_drldm: bool = False
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        errors = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            want = f.type if isinstance(f.type, str) else f.type.__name__
            if want == "int" and (not isinstance(v, int) or isinstance(v, bool)):
                errors.append(f"{f.name} must be an integer, got {v!r}")
            elif want == "float":
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    errors.append(f"{f.name} must be a number, got {v!r}")
                else:
                    setattr(self, f.name, float(v))
            elif want == "bool" and not isinstance(v, bool):
                errors.append(f"{f.name} must be true or false, got {v!r}")
            elif want == "str" and not isinstance(v, str):
                errors.append(f"{f.name} must be a string, got {v!r}")
            elif want == "list" and not isinstance(v, (list, tuple)):
                errors.append(f"{f.name} must be a list, got {v!r}")
        if errors:
            raise ConfigError("; ".join(errors))
        if self.K < 1 or self.T < 1 or self.cp < 1:
            errors.append("K, T and cp must be positive")
        if len(self.betas) != self.T:
            errors.append(f"betas has {len(self.betas)} entries but T = {self.T}")
        if len(self.blocks) != 4 or any(int(b) < 1 for b in self.blocks):
            errors.append(f"blocks must list four positive counts, got {self.blocks}")
        if self.image_size % 8:
            errors.append(f"image_size must be a multiple of 8, got {self.image_size}")
        if self.mixer_init_scale < 0:
            errors.append(f"mixer_init_scale must be nonnegative, got {self.mixer_init_scale}")
        if self.precision not in ("float32", "float64"):
            errors.append(f"precision must be float32 or float64, got {self.precision!r}")
        if self.no_x_hat and self.no_x_tilde:
            errors.append("no_x_hat and no_x_tilde cannot both be set")
        if not self.degradations:
            errors.append("degradation menu is empty")
        if errors:
            raise ConfigError("; ".join(errors))
        self.betas = [float(b) for b in self.betas]
        self.blocks = [int(b) for b in self.blocks]
        self.degradations = [dict(d) for d in self.degradations]

    def ablations(self) -> dict[str, bool]:
        return {name: getattr(self, name) for name in ABLATIONS}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            try:
                values[key] = json.loads(val.strip())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {n}: value for {key!r} is not a JSON literal: {exc}") from None
        return cls(**values)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text)

    def with_env_paths(self) -> "RunConfig":
        """Apply path overrides from the environment (paths only)."""
        changes = {k: os.environ[v] for k, v in PATH_ENV.items() if os.environ.get(v)}
        return self.replace(**changes) if changes else self
