"""
Experiment Configuration

Validated settings for one simulation run. Files are flat key=value text
(parsed with python-dotenv); command-line flags override file values.
"""

import io
from pathlib import Path
from typing import Any, Literal, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.errors import ConfigError

DatasetFormat = Literal["movielens-dat", "tsv", "synthetic"]

# Reference-scale defaults that depend on the dataset family
GROUPS_MOVIELENS = 100
GROUPS_OTHER = 200
MIN_INTERACTIONS_DEFAULTS = {"movielens-dat": 20, "tsv": 10, "synthetic": 1}


class ExperimentConfig(BaseModel):
    """Every knob of a run; defaults follow the reference hyperparameters"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Dataset
    dataset_path: Optional[str] = Field(None, description="Interaction file")
    dataset_format: DatasetFormat = Field("movielens-dat", description="Input format")
    min_interactions: Optional[int] = Field(None, ge=1, description="k-core threshold")
    split_mode: Literal["per_user", "global"] = "per_user"
    train_ratio: float = Field(0.8, gt=0.0, le=1.0)
    valid_ratio: float = Field(0.1, ge=0.0, lt=1.0)
    test_ratio: float = Field(0.1, ge=0.0, lt=1.0)

    # Synthetic block-community corpus
    synthetic_users: int = Field(500, ge=2)
    synthetic_items: int = Field(300, ge=2)
    synthetic_communities: int = Field(5, ge=1)
    synthetic_train_per_user: int = Field(30, ge=1)

    # Model
    embedding_dim: int = Field(64, ge=1, description="d")
    layers: int = Field(4, ge=1, description="K")
    groups: Optional[int] = Field(None, ge=2, description="C")
    fake_items: int = Field(1, ge=0, description="F")
    neg_count: int = Field(1, ge=0, description="Fabricated upload negatives")
    fallback_negatives: int = Field(1, ge=1)
    item_topk_mode: bool = False

    # Optimization
    lr: float = Field(0.001, gt=0.0)
    weight_decay: float = Field(0.0001, ge=0.0)
    local_epochs: int = Field(3, ge=0)

    # Privacy
    delta: float = Field(1.0, gt=0.0, description="L1 clip threshold")
    ldp_lambda: float = Field(0.1, ge=0.0, description="Laplace noise scale")

    # Co-clustering
    fuzziness: float = Field(2.0, gt=1.0, description="l")
    fcm_max_iters: int = Field(100, ge=1)
    fcm_tol: float = Field(1e-4, gt=0.0)

    # Schedule
    rounds: int = Field(20, ge=0)
    sample_frac: float = Field(1.0, gt=0.0, le=1.0)
    recluster_every: int = Field(1, ge=1)
    ego_upload_every: int = Field(1, ge=1)
    eval_every: int = Field(1, ge=1)
    k: int = Field(20, ge=1)
    select_on_valid: bool = False
    early_stop_patience: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, lt=2**63)

    @model_validator(mode="after")
    def _check_cross_fields(self) -> "ExperimentConfig":
        total = self.train_ratio + self.valid_ratio + self.test_ratio
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"train/valid/test ratios must sum to 1, got {total}")
        if self.dataset_format != "synthetic" and not self.dataset_path:
            raise ValueError("dataset_path is required unless dataset_format=synthetic")
        if self.early_stop_patience and not self.select_on_valid:
            raise ValueError("early_stop_patience requires select_on_valid")
        return self

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.valid_ratio, self.test_ratio)

    @property
    def resolved_groups(self) -> int:
        if self.groups is not None:
            return self.groups
        return GROUPS_MOVIELENS if self.dataset_format == "movielens-dat" else GROUPS_OTHER

    @property
    def resolved_min_interactions(self) -> int:
        if self.min_interactions is not None:
            return self.min_interactions
        return MIN_INTERACTIONS_DEFAULTS[self.dataset_format]

    @property
    def alphas(self) -> list[float]:
        """Uniform layer-combination weights"""
        return [1.0 / (self.layers + 1)] * (self.layers + 1)

    def resolved(self) -> dict[str, Any]:
        """Every effective value, dataset-dependent defaults filled in"""
        values = self.model_dump()
        values["groups"] = self.resolved_groups
        values["min_interactions"] = self.resolved_min_interactions
        return values

    def to_resolved_text(self) -> str:
        lines = []
        for key, value in self.resolved().items():
            if value is None:
                value = ""
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


class RuntimeSettings(BaseSettings):
    """Process-level settings read from SDFE_* environment variables"""

    model_config = SettingsConfigDict(env_prefix="SDFE_")

    threads: int = Field(1, ge=1, description="Worker threads for device actors")


# =============================================================================
# Loading
# =============================================================================


def _format_errors(exc: ValidationError) -> list[str]:
    violations = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "config"
        violations.append(f"{loc}: {err['msg']}")
    return violations


def read_config_file(path: Union[str, Path]) -> dict[str, Optional[str]]:
    """
    Read a flat key=value file.

    Section headers ("[run]") and comments are ignored; keys are flat.

    Args:
        path: Config file path

    Returns:
        Raw string values keyed by field name
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"], source=str(path))

    text = "\n".join(
        line
        for line in path.read_text().splitlines()
        if not (line.strip().startswith("[") and line.strip().endswith("]"))
    )
    values = dotenv_values(stream=io.StringIO(text))
    return {key.strip().lower().replace("-", "_"): value for key, value in values.items()}


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> ExperimentConfig:
    """
    Build a validated configuration from a file and flag overrides.

    Args:
        path: Optional key=value config file
        overrides: Values from command-line flags (None entries are ignored)

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: Listing every violation
    """
    values: dict[str, Any] = {}
    if path is not None:
        values.update(
            {key: value for key, value in read_config_file(path).items() if value not in (None, "")}
        )
    if overrides:
        values.update({key: value for key, value in overrides.items() if value is not None})

    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(_format_errors(e), source=str(path) if path else None)
