"""
MAMBA core - shared domain types, configuration and deterministic randomness.

Everything the other modules agree on lives here:
- MambaConfig: reference hyperparameters plus the ablation toggles
- RngStream: one global seed fanned out to named substreams
- Categorical latent helpers (straight-through sampling, flatten / unflatten)
- Run manifest and versioned blob files (checkpoints, buffer dumps)
"""
import hashlib
import io
import math
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, Optional, Set

import numpy as np
import torch
import torch.nn.functional as F
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

load_dotenv()

# =============================================================================
# CONFIGURATION
# =============================================================================

RUNS_DIR = os.getenv("MAMBA_RUNS_DIR", "runs")
DEVICE = os.getenv("MAMBA_DEVICE", "cpu")
CHECKPOINT_DIR = os.getenv("MAMBA_CHECKPOINT_DIR", RUNS_DIR)
TORCH_THREADS = int(os.getenv("MAMBA_TORCH_THREADS", "0"))

if TORCH_THREADS > 0:
    torch.set_num_threads(TORCH_THREADS)


# =============================================================================
# ERRORS
# =============================================================================

class MambaError(Exception):
    """Base class for every error raised by this package"""


class InvalidInputError(MambaError, ValueError):
    pass


class ConfigError(MambaError, ValueError):
    pass


class CheckpointError(ConfigError):
    pass


class CodecError(MambaError, ValueError):
    pass


class ProtocolError(MambaError, RuntimeError):
    pass


class InternalError(MambaError, RuntimeError):
    pass


class NotReadyError(MambaError, RuntimeError):
    pass


class ContractViolationError(MambaError, RuntimeError):
    """An environment or policy contract was broken (e.g. a masked action)"""


class DivergenceError(MambaError, RuntimeError):
    """Centralized and decentralized execution disagreed"""

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


# =============================================================================
# ENUMS
# =============================================================================

class EnvName(str, Enum):
    MINIRAIL = "minirail"
    SKIRMISH = "skirmish"


class Algo(str, Enum):
    MAMBA = "mamba"
    PPO_MF = "ppo-mf"


class EvalMode(str, Enum):
    CENTRAL = "central"
    DECENTRALIZED = "decentralized"


class AbsorbingPosterior(str, Enum):
    ZERO_OBS = "zero_obs"
    PRIOR = "prior"


# Fields that must lie in (0, 1]
_RATE_FIELDS = (
    "gae_lambda", "entropy_coef", "entropy_annealing", "clip_eps", "actor_lr",
    "critic_lr", "gamma", "model_lr", "kl_balance_entropy", "kl_balance_ce",
)

# Per-environment columns of the reference hyperparameter table
ENV_PRESETS: Dict[EnvName, Dict[str, Any]] = {
    EnvName.MINIRAIL: {"model_epochs": 40, "seq_len": 50, "buffer_size": 500_000, "hidden_size": 400,
                        "locality_radius": 5},
    EnvName.SKIRMISH: {"model_epochs": 60, "seq_len": 20, "buffer_size": 250_000, "hidden_size": 256},
}


class MambaConfig(BaseModel):
    """Resolved run configuration. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Run
    env: EnvName = EnvName.MINIRAIL
    algo: Algo = Algo.MAMBA
    n_agents: int = Field(2, ge=1, le=64)
    seed: int = Field(0, ge=0, lt=2**64)
    total_steps: int = Field(50_000, ge=1)
    device: str = DEVICE

    # PPO
    batch_size: int = Field(2000, ge=1)
    gae_lambda: float = 0.95
    entropy_coef: float = 0.001
    entropy_annealing: float = 0.99998
    ppo_updates: int = Field(4, ge=1)
    ppo_epochs: int = Field(5, ge=1)
    clip_eps: float = 0.2
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    gamma: float = 0.99
    normalize_advantages: bool = True
    critic_layers: int = Field(1, ge=1)
    critic_uses_hidden: bool = False

    # Model
    model_lr: float = 2e-4
    model_epochs: int = Field(40, ge=1)
    n_rollouts: int = Field(40, ge=1)
    seq_len: int = Field(50, ge=2)
    horizon: int = Field(15, ge=1)
    buffer_size: int = Field(500_000, ge=1)
    n_categoricals: int = Field(32, ge=1)
    n_classes: int = Field(32, ge=2)
    kl_balance_entropy: float = 0.2
    kl_balance_ce: float = 0.8
    logit_clamp: float = Field(15.0, gt=0)
    info_loss_weight: float = Field(1.0, ge=0)
    predict_action_mask: bool = True
    absorbing_posterior: AbsorbingPosterior = AbsorbingPosterior.ZERO_OBS

    # Common
    grad_clip: float = Field(100.0, gt=0)
    trajectories_per_update: int = Field(1, ge=1)
    hidden_size: int = Field(400, ge=1)

    # Communication block
    comm_layers: int = Field(3, ge=1)
    comm_ffn_size: Optional[int] = None
    action_embedding: bool = False
    broadcast_dead: bool = True

    # Ablation toggles
    use_info_loss: bool = True
    use_kl_balancing: bool = True
    comm_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    use_positional_encoding: bool = True
    locality_radius: Optional[int] = Field(None, ge=0)
    use_linear_comm: bool = False

    # Imagination thresholds
    discount_threshold: float = Field(0.5, ge=0.0, le=1.0)
    mask_threshold: float = Field(0.5, ge=0.0, le=1.0)

    # Evaluation / baseline
    eval_every: int = Field(2000, ge=1)
    eval_episodes: int = Field(10, ge=0)
    mf_rollout_steps: int = Field(1000, ge=1)

    # Environment overrides (None = environment default)
    grid_size: Optional[int] = Field(None, ge=3)
    max_episode_steps: Optional[int] = Field(None, ge=1)
    n_enemies: Optional[int] = Field(None, ge=1)

    @field_validator("locality_radius", "grid_size", "max_episode_steps", "n_enemies", "comm_ffn_size", mode="before")
    @classmethod
    def _none_strings(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("", "none", "inf", "null"):
            return None
        return value

    @model_validator(mode="after")
    def _check_invariants(self):
        for name in _RATE_FIELDS:
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name}={value} must lie in (0, 1]")
        if abs(self.kl_balance_ce + self.kl_balance_entropy - 1.0) > 1e-9:
            raise ValueError("kl_balance_ce + kl_balance_entropy must equal 1")
        return self

    # -------------------------------------------------------------------------

    @classmethod
    def build(cls, **values) -> "MambaConfig":
        """Construct and validate, reporting problems as ConfigError"""
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigError(_format_validation_error(e)) from e

    @classmethod
    def for_env(cls, env, **overrides) -> "MambaConfig":
        """Apply the per-environment reference column, then overrides"""
        env = EnvName(env)
        values = {"env": env, **ENV_PRESETS[env]}
        values.update(overrides)
        return cls.build(**values)

    @property
    def latent_size(self) -> int:
        return self.n_categoricals * self.n_classes

    @property
    def message_bits(self) -> int:
        """Bits needed for one latent on the wire (requires power-of-two classes)"""
        return self.n_categoricals * int(math.log2(self.n_classes))

    @property
    def comm_mode(self) -> str:
        return "shared" if self.use_linear_comm else "ego"

    def with_updates(self, **values) -> "MambaConfig":
        data = self.model_dump()
        data.update(values)
        return MambaConfig.build(**data)

    def manifest_items(self) -> Dict[str, str]:
        return {name: _manifest_value(getattr(self, name)) for name in type(self).model_fields}

    def config_hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.manifest_items().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _manifest_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value)


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item.get("loc", ())) or "config"
        parts.append(f"{loc}: {item.get('msg')}")
    return "; ".join(parts)


def load_config(path: Optional[str] = None, **overrides) -> MambaConfig:
    """
    Load a flat key=value config file and apply overrides.

    The environment preset is applied first so that a file naming only
    `env=skirmish` still gets the skirmish column of defaults.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        raw = dotenv_values(path, encoding="utf-8")
        for key, value in raw.items():
            if value is None:
                raise ConfigError(f"config key without value: {key}")
            if key not in MambaConfig.model_fields:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    env = values.get("env", EnvName.MINIRAIL)
    try:
        env = EnvName(env)
    except ValueError as e:
        raise ConfigError(f"unknown env: {env}") from e
    preset = dict(ENV_PRESETS[env])
    preset.update(values)
    preset["env"] = env
    return MambaConfig.build(**preset)


def write_manifest(config: MambaConfig, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
    """Write every resolved config field (and extras) as key=value lines"""
    items = config.manifest_items()
    for key, value in (extra or {}).items():
        items[key] = value if isinstance(value, str) else _manifest_value(value)
    items["config_hash"] = config.config_hash()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for key, value in items.items():
            f.write(f"{key}={value}\n")


def read_manifest(path: str) -> Dict[str, str]:
    return {k: (v if v is not None else "") for k, v in dotenv_values(path, encoding="utf-8").items()}


# =============================================================================
# DETERMINISTIC RANDOMNESS
# =============================================================================

def _name_words(name: str) -> tuple:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4))


class RngStream:
    """
    Seeded random stream with named substreams.

    Holds a NumPy generator (environments, buffer sampling) and a torch
    generator (latent and action sampling). Not safe to share between
    workers: give every worker its own substream.
    """

    def __init__(self, seed: int, name: str = "root"):
        if not 0 <= int(seed) < 2**64:
            raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.name = name
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=_name_words(name))
        self.numpy = np.random.Generator(np.random.PCG64(sequence))
        torch_seed = int(sequence.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)
        self.torch = torch.Generator().manual_seed(torch_seed)

    def substream(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{name}")

    def randint(self, high: int) -> int:
        return int(self.numpy.integers(0, high))

    def state(self) -> Dict[str, Any]:
        return {"numpy": self.numpy.bit_generator.state, "torch": self.torch.get_state()}

    def set_state(self, state: Dict[str, Any]) -> None:
        self.numpy.bit_generator.state = state["numpy"]
        self.torch.set_state(state["torch"])

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, name={self.name!r})"


# =============================================================================
# CATEGORICAL LATENT
# =============================================================================

def sample_categorical(logits: torch.Tensor, rng: Optional[RngStream] = None, mode: str = "sample") -> torch.Tensor:
    """
    Draw a one-hot sample per group from [..., K, C] logits.

    When the logits carry gradients the sample is straight-through: its value
    is the one-hot draw but its backward pass is that of the softmax
    probabilities. mode="probs" returns the probabilities themselves.
    """
    if not torch.isfinite(logits).all():
        raise InvalidInputError("latent logits must be finite")
    probs = torch.softmax(logits, dim=-1)
    if mode == "probs":
        return probs
    if mode != "sample":
        raise InvalidInputError(f"unknown latent mode: {mode}")
    n_classes = probs.shape[-1]
    flat = probs.detach().reshape(-1, n_classes)
    generator = rng.torch if rng is not None else None
    index = torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
    sample = F.one_hot(index, n_classes).to(probs.dtype)
    if probs.requires_grad:
        sample = sample + (probs - probs.detach())
    return sample


def flatten_latent(sample: torch.Tensor) -> torch.Tensor:
    """[..., K, C] -> [..., K*C], row-major by group"""
    return sample.reshape(*sample.shape[:-2], sample.shape[-2] * sample.shape[-1])


def unflatten_latent(flat: torch.Tensor, n_groups: int, n_classes: int) -> torch.Tensor:
    """[..., K*C] -> class index per group [..., K]"""
    if flat.shape[-1] != n_groups * n_classes:
        raise InvalidInputError(f"expected last dim {n_groups * n_classes}, got {flat.shape[-1]}")
    return flat.reshape(*flat.shape[:-1], n_groups, n_classes).argmax(dim=-1)


def latent_indices(sample: torch.Tensor) -> torch.Tensor:
    return sample.argmax(dim=-1)


def one_hot_latent(indices: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(indices.long(), n_classes).to(dtype)


def flat_index(group: int, cls: int, n_classes: int) -> int:
    return group * n_classes + cls


def bootstrap_latent(n_groups: int, n_classes: int, batch_shape=(), dtype=torch.float32) -> torch.Tensor:
    """Flat latent selecting class 0 in every group; the t=0 message content"""
    index = torch.zeros(*batch_shape, n_groups, dtype=torch.long)
    return flatten_latent(one_hot_latent(index, n_classes, dtype))


@dataclass
class CategoricalLatent:
    """Logits and a sample of the K x C stochastic state"""

    logits: torch.Tensor
    sample: torch.Tensor

    @classmethod
    def draw(cls, logits: torch.Tensor, rng: Optional[RngStream] = None, mode: str = "sample") -> "CategoricalLatent":
        return cls(logits=logits, sample=sample_categorical(logits, rng, mode))

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def flat(self) -> torch.Tensor:
        return flatten_latent(self.sample)

    @property
    def indices(self) -> torch.Tensor:
        return latent_indices(self.sample)


@dataclass
class ModelState:
    """Deterministic h and flat stochastic z, batched over any leading dims"""

    h: torch.Tensor
    z: torch.Tensor

    def detach(self) -> "ModelState":
        return ModelState(self.h.detach(), self.z.detach())

    def clone(self) -> "ModelState":
        return ModelState(self.h.clone(), self.z.clone())

    @property
    def features(self) -> torch.Tensor:
        return torch.cat([self.z, self.h], dim=-1)

    def __getitem__(self, index) -> "ModelState":
        return ModelState(self.h[index], self.z[index])


@dataclass
class AgentStep:
    """One agent's record at one environment step"""

    obs: np.ndarray
    action: int
    reward: float
    discount: float
    action_mask: np.ndarray
    alive: bool
    neighbors: Set[int] = field(default_factory=set)

    def validate(self) -> None:
        if self.alive and not bool(self.action_mask[self.action]):
            raise InvalidInputError(f"action {self.action} is masked out for an alive agent")
        if not self.alive and (self.reward != 0.0 or self.discount != 0.0):
            raise InvalidInputError("absorbing steps must carry reward 0 and discount 0")
        if not 0.0 <= self.discount <= 1.0:
            raise InvalidInputError(f"discount {self.discount} outside [0, 1]")


# =============================================================================
# VERSIONED BLOBS
# =============================================================================

BLOB_MAGIC = b"MAMBA1"
BLOB_VERSION = 1


def write_blob(path: str, kind: str, payload: Dict[str, Any]) -> None:
    """Write magic | version | kind | torch-serialized payload"""
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    kind_bytes = kind.encode("ascii")
    header = BLOB_MAGIC + struct.pack(">HB", BLOB_VERSION, len(kind_bytes)) + kind_bytes
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header + buffer.getvalue())


def read_blob(path: str, kind: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise CheckpointError(f"file not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(BLOB_MAGIC):
        raise CheckpointError(f"{path}: missing MAMBA1 header")
    version, kind_len = struct.unpack(">HB", data[len(BLOB_MAGIC):len(BLOB_MAGIC) + 3])
    if version != BLOB_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = len(BLOB_MAGIC) + 3
    found_kind = data[start:start + kind_len].decode("ascii")
    if found_kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} file, found {found_kind}")
    return torch.load(io.BytesIO(data[start + kind_len:]), map_location="cpu", weights_only=False)


def as_bool_mask(neighbors: Iterable[Iterable[int]], n_agents: int) -> np.ndarray:
    """Neighbor sets -> boolean [n, n] matrix with a true diagonal"""
    mask = np.eye(n_agents, dtype=bool)
    for i, group in enumerate(neighbors):
        for j in group:
            mask[i, int(j)] = True
    return mask
