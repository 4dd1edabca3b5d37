"""Flat key=value experiment configuration.

Files are plain text: one ``dotted.key = value`` per line, ``#`` comments,
no nesting.  Unknown keys are rejected with the offending line number.
Two presets ship with the package: ``desk_defaults`` (matches the built-in
defaults; minutes-scale runs) and ``paper_defaults`` (the reference
hyperparameters from the method's original setting).
"""

import hashlib
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, choices-or-None)
SCHEMA = {
    "run.method": (str, "adapter_replay",
                   ("adapter_replay", "frozen_generator_replay", "continual_finetune",
                    "zero_shot", "l2_anchor", "real_replay")),
    "run.seed": (int, 1, None),
    "run.steps_per_task": (int, 300, None),
    "run.batch": (int, 32, None),
    "run.lr": (float, 1e-3, None),
    "run.beta1": (float, 0.9, None),
    "run.beta2": (float, 0.999, None),
    "run.weight_decay": (float, 1e-2, None),
    "run.freeze_tau": (_bool, False, None),
    "run.replay_fraction": (float, 0.5, None),
    "run.l2_lambda": (float, 0.1, None),
    "run.real_replay_per_class": (int, 2, None),
    "run.include_row0_transfer": (_bool, True, None),
    "run.class_incremental": (_bool, False, None),
    "run.save_replay": (_bool, True, None),

    "suite.seed": (int, 1, None),
    "suite.n_tasks": (int, 7, None),
    "suite.classes_per_task": (int, 4, None),
    "suite.train_per_class": (int, 100, None),
    "suite.test_per_class": (int, 50, None),
    "suite.gap": (str, "hard", ("mild", "hard")),
    "suite.base_classes": (int, 8, None),

    "vlm.embed_dim": (int, 24, None),
    "vlm.hidden": (int, 48, None),
    "vlm.token_dim": (int, 32, None),
    "vlm.vocab_cap": (int, 256, None),
    "vlm.tau_init": (float, 0.07, None),
    "vlm.template": (str, "a photo of a {c}", None),
    "vlm.pretrain_steps": (int, 800, None),
    "vlm.pretrain_batch": (int, 32, None),
    "vlm.pretrain_lr": (float, 1e-3, None),

    "gen.steps": (int, 50, None),
    "gen.beta_start": (float, 0.01, None),
    "gen.beta_end": (float, 0.30, None),
    "gen.width": (int, 128, None),
    "gen.time_dim": (int, 16, None),
    "gen.cond_dim": (int, 16, None),
    "gen.pretrain_epochs": (int, 30, None),
    "gen.pool_per_class": (int, 40, None),
    "gen.batch": (int, 64, None),
    "gen.lr": (float, 1e-3, None),
    "gen.cond_dropout": (float, 0.1, None),
    "gen.guidance": (float, 7.5, None),

    "lora.rank": (int, 16, None),
    "lora.alpha": (float, 0.0, None),  # 0 means "equal to rank"
    "lora.epochs": (int, 400, None),
    "lora.lr": (float, 1e-3, None),
    "lora.select_l": (int, 2, None),
    "lora.policy": (str, "top", ("top_and_bottom", "top", "bottom", "middle", "random")),
    "lora.cond_dropout": (float, 0.0, None),

    "select.m_pre": (int, 8, None),
    "select.k": (int, 1, None),
    "select.policy": (str, "top", ("top", "middle", "random", "bottom")),

    "loss.lambda_cd": (float, 16.0, None),
    "loss.lambda_ita": (float, 0.1, None),
    "loss.lambda_awc": (float, 75.0, None),
    "loss.use_cd": (_bool, True, None),
    "loss.use_ita": (_bool, True, None),
    "loss.use_awc": (_bool, True, None),
    "loss.awc_decay": (float, 0.99, None),
}

SUITE_KEYS = tuple(k for k in SCHEMA if k.startswith("suite."))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class ExperimentConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default, _) in SCHEMA.items()}
        for key, val in (values or {}).items():
            self._set(key, val, where="<init>")

    def _set(self, key: str, val, where: str = "") -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        parser, _, choices = SCHEMA[key]
        try:
            if isinstance(val, str):
                parsed = parser(val)
            elif parser is _bool:
                parsed = bool(val)
            elif parser is str:
                parsed = str(val)
            else:
                parsed = parser(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
        if choices is not None and parsed not in choices:
            raise ConfigError(f"{where}: {key} must be one of {choices}, got {parsed!r}")
        self.values[key] = parsed

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        return self.values[key]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig()
        cfg.values = dict(self.values)
        for key, val in overrides.items():
            cfg._set(key, val, where="<override>")
        return cfg

    def to_text(self) -> str:
        return "\n".join(f"{k} = {_format_value(self.values[k])}" for k in sorted(self.values)) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def suite_hash(self) -> str:
        text = "\n".join(f"{k} = {_format_value(self.values[k])}" for k in SUITE_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    @staticmethod
    def parse_text(text: str, where: str = "<config>") -> "ExperimentConfig":
        cfg = ExperimentConfig()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{where}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            cfg._set(key.strip(), val.strip(), where=f"{where}:{lineno}")
        return cfg

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return ExperimentConfig.parse_text(path.read_text(encoding="utf-8"), where=str(path))

    @staticmethod
    def from_preset(name: str) -> "ExperimentConfig":
        ref = resources.files("synreplay") / "presets" / f"{name}.cfg"
        if not ref.is_file():
            raise ConfigError(f"unknown preset {name!r}")
        return ExperimentConfig.parse_text(ref.read_text(encoding="utf-8"), where=f"<preset:{name}>")


def load_config(spec: str) -> ExperimentConfig:
    """Accept either a preset name or a path to a config file."""
    if spec in ("desk_defaults", "paper_defaults"):
        return ExperimentConfig.from_preset(spec)
    return ExperimentConfig.from_file(spec)
