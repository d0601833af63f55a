"""Run configuration: geometry, dimensions, training hyperparameters,
ablation toggles, and the plain key=value config-file format.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

__all__ = [
    "RunConfig",
    "ConfigError",
    "SHORT_SESSION",
    "LONG_SESSION",
    "VARIANT_FLAGS",
    "VARIANT_LABELS",
    "apply_variant",
    "parse_config_file",
    "parse_session_length",
]

SHORT_SESSION = 10
LONG_SESSION = 50

# Ablation variants by number; each switches exactly one component off.
VARIANT_FLAGS = {
    "1": "no_embeddings",
    "2": "no_category_feedback",
    "3": "no_initial_gru",
    "4": "no_cnn",
    "5": "no_attention",
    "6": "no_session_gru",
    "7": "dense_decoder",
}

VARIANT_LABELS = {
    "full": "full",
    "1": "no-embeddings",
    "2": "no-category-feedback",
    "3": "no-initial-gru",
    "4": "no-page-conv",
    "5": "no-attention",
    "6": "no-session-gru",
    "7": "dense-decoder",
}


class ConfigError(ValueError):
    """Raised for malformed config files or invariant violations."""


@dataclass
class RunConfig:
    # Page geometry and history window
    page_rows: int = 5
    page_cols: int = 2
    history_length: int = 10

    # Representation dimensions
    item_dim: int = 50
    item_embed_dim: int = 50
    category_count: int = 20
    category_embed_dim: int = 35
    feedback_embed_dim: int = 15
    hidden_dim: int = 64
    critic_hidden_dim: int = 128

    # Reinforcement-learning hyperparameters
    gamma: float = 0.95
    tau: float = 0.01
    batch_size: int = 32
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    lr_alignment: float = 1e-3
    buffer_capacity: int = 10_000
    steps_per_session: int = 10
    noise_sigma_start: float = 0.4
    noise_sigma_end: float = 0.05
    recall_neighbors: int = 25
    offline_epochs: int = 5

    # Synthetic world
    catalog_size: int = 1000
    sessions: int = 500
    logging_policy: str = "greedy"
    split_fraction: float = 0.7

    # Ablation toggles
    no_embeddings: bool = False
    no_category_feedback: bool = False
    no_initial_gru: bool = False
    no_cnn: bool = False
    no_attention: bool = False
    no_session_gru: bool = False
    dense_decoder: bool = False

    # Reproducibility and data locations
    seed: int = 0
    catalog_path: str = ""
    log_path: str = ""

    @property
    def page_size(self) -> int:
        return self.page_rows * self.page_cols

    @property
    def feedback_dim(self) -> int:
        return 3

    @property
    def slot_dim(self) -> int:
        """Per-slot input width after embedding (or raw when disabled)."""
        if self.no_embeddings:
            item = self.item_dim
            extra = self.category_count + self.feedback_dim
        else:
            item = self.item_embed_dim
            extra = self.category_embed_dim + self.feedback_embed_dim
        if self.no_category_feedback:
            extra = 0
        return item + extra

    @property
    def page_vector_dim(self) -> int:
        """Width of the per-page summary fed to the session recurrence."""
        if self.no_cnn:
            return self.page_size * self.slot_dim
        return self.hidden_dim

    def validate(self) -> "RunConfig":
        checks = [
            (self.page_rows >= 3 and self.page_cols >= 2, "page grid must be at least 3x2"),
            (self.history_length >= 1, "history_length must be >= 1"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (0.0 < self.tau <= 1.0, "tau must lie in (0, 1]"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.buffer_capacity >= 1, "buffer_capacity must be >= 1"),
            (self.steps_per_session >= 1, "steps_per_session must be >= 1"),
            (self.catalog_size >= self.page_size, "catalog_size must cover one page"),
            (0.0 < self.split_fraction < 1.0, "split_fraction must lie in (0, 1)"),
            (self.recall_neighbors >= 1, "recall_neighbors must be >= 1"),
            (self.logging_policy in ("greedy", "random"), "logging_policy must be greedy or random"),
            (
                not (self.no_cnn and self.no_session_gru),
                "no_cnn and no_session_gru cannot be combined (page vector width would "
                "no longer match the state width)",
            ),
        ]
        positive_dims = (
            "item_dim",
            "item_embed_dim",
            "category_count",
            "category_embed_dim",
            "feedback_embed_dim",
            "hidden_dim",
            "critic_hidden_dim",
        )
        for name in positive_dims:
            checks.append((getattr(self, name) >= 1, f"{name} must be positive"))
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


def apply_variant(config: RunConfig, variant: str) -> RunConfig:
    """Return a config with one ablation variant enabled ('full' for none)."""
    if variant == "full":
        return config
    flag = VARIANT_FLAGS.get(str(variant))
    if flag is None:
        raise ConfigError(f"unknown variant {variant!r}; expected full or 1..7")
    return config.replace(**{flag: True})


def _coerce(name: str, raw: str, target_type) -> object:
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"config key {name}: cannot parse {raw!r} as {target_type.__name__}") from None


def parse_config_file(path, base: RunConfig | None = None) -> RunConfig:
    """Read key=value lines (with # comments) over the built-in defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    base = base or RunConfig()
    return dataclasses.replace(base, **values).validate()


def parse_session_length(raw: str) -> int:
    """Accept 'short', 'long', or an explicit positive page count."""
    if raw == "short":
        return SHORT_SESSION
    if raw == "long":
        return LONG_SESSION
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"session length must be short, long, or an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError("session length must be non-negative")
    return value
