"""Model, task, and training configuration types.

A RunConfig is the single JSON document every CLI subcommand consumes. Its
`ablations` section only overrides fields that also live on ModelConfig, so
an ablation grid is a set of small config diffs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError


@dataclass(frozen=True)
class ModalityDef:
    name: str
    raw_dim: int | None = None   # None marks a token modality


DEFAULT_MODALITIES = (
    ModalityDef("rgb", 16),
    ModalityDef("flow", 16),
    ModalityDef("obj", 16),
    ModalityDef("aud", 8),
    ModalityDef("hist", None),
    ModalityDef("quest", None),
)


@dataclass
class ModelConfig:
    d: int = 64
    n_enc_layers: int = 4
    n_dec_layers: int = 2
    n_heads: int = 4
    delta: int = 2               # mixer insertion period over encoder layers
    k_tracked: int = 10          # tokens tracked per modality
    lam: float = 0.9             # hidden-state blend: 1.0 keeps the backbone untouched
    m_bank: int = 4              # vectors per edge-estimation weight bank
    knn_k: int = 4
    appnp_alpha: float = 0.1
    appnp_steps: int = 2
    alpha1: float = 1.0
    alpha2: float = 100.0
    alpha3: float = 100.0
    elbo_sign: int = 1
    vocab_size: int = 40
    max_answer_len: int = 20
    max_seq_len: int = 256
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    sep_id: int = 3
    modalities: tuple[ModalityDef, ...] = DEFAULT_MODALITIES
    # ablation switches
    gnn_off: tuple[str, ...] = ()
    local_elbo: bool = True
    global_elbo: bool = True
    mmc: bool = True
    ib: bool = True
    random_graphs: bool = False
    knn_only: bool = False
    qp_swap: bool = False
    global_refined: bool = False

    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def active_names(self) -> list[str]:
        return [m.name for m in self.modalities if m.name not in self.gnn_off]

    def mixer_layers(self) -> list[int]:
        return [l for l in range(1, self.n_enc_layers + 1) if l % self.delta == 0]

    def validate(self) -> None:
        if self.d % self.n_heads != 0:
            raise ConfigError("d must be divisible by n_heads")
        if self.k_tracked < 2:
            raise ConfigError("k_tracked must be >= 2")
        if self.m_bank < 1:
            raise ConfigError("m_bank must be >= 1")
        if not self.knn_k < self.k_tracked:
            raise ConfigError("knn_k must be < k_tracked")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError("lam must lie in (0, 1]")
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if not 0.0 < self.appnp_alpha <= 1.0:
            raise ConfigError("appnp_alpha must lie in (0, 1]")
        if self.appnp_steps < 0:
            raise ConfigError("appnp_steps must be >= 0")
        if self.elbo_sign not in (1, -1):
            raise ConfigError("elbo_sign must be +1 or -1")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ConfigError("layer counts must be >= 1")
        names = self.modality_names()
        if len(set(names)) != len(names):
            raise ConfigError("modality names must be unique")
        for off in self.gnn_off:
            if off not in names:
                raise ConfigError(f"gnn_off names unknown modality {off!r}")


@dataclass
class ChannelDef:
    name: str
    dim: int


DEFAULT_CHANNELS = (
    ChannelDef("rgb", 16),
    ChannelDef("flow", 16),
    ChannelDef("obj", 16),
    ChannelDef("aud", 8),
)


@dataclass
class TaskSpec:
    """Synthetic cross-modal dialog task parameters."""

    channels: tuple[ChannelDef, ...] = DEFAULT_CHANNELS
    l_v: int = 12                # positions per continuous channel
    n_classes: int = 10
    noise_sigma: float = 0.1
    turns: int = 3               # QA turns per dialog; earlier ones land in the history
    vocab_size: int = 40
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    sep_id: int = 3
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.l_v < 1 or self.n_classes < 2 or self.turns < 1:
            raise ConfigError("l_v >= 1, n_classes >= 2, turns >= 1 required")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        needed = 4 + self.n_classes + len(self.channels) + self.l_v + 8
        if self.vocab_size < needed:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small, need {needed}"
            )

    def modalities(self) -> tuple[ModalityDef, ...]:
        mods = [ModalityDef(c.name, c.dim) for c in self.channels]
        mods.append(ModalityDef("hist", None))
        mods.append(ModalityDef("quest", None))
        return tuple(mods)


@dataclass
class TrainConfig:
    lr_backbone: float = 1e-4    # paper-style fine-tune rates x10 for from-scratch
    lr_rest: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    max_steps: int = 500
    clip_norm: float = 1.0
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 100
    eval_samples: int = 128

    def validate(self) -> None:
        if self.lr_backbone <= 0 or self.lr_rest < 0:
            raise ConfigError("learning rates must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ConfigError("max_steps and batch_size must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")


ABLATION_KEYS = {
    "lambda": "lam",
    "delta": "delta",
    "k": "k_tracked",
    "gnn_off": "gnn_off",
    "local_elbo": "local_elbo",
    "global_elbo": "global_elbo",
    "random_graphs": "random_graphs",
    "knn_only": "knn_only",
    "mmc": "mmc",
    "ib": "ib",
    "elbo_sign": "elbo_sign",
    "qp_swap": "qp_swap",
    "global_refined": "global_refined",
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.task.validate()
        if self.task.l_v < self.model.k_tracked:
            raise ConfigError("task l_v must be >= model k_tracked")
        if self.task.vocab_size != self.model.vocab_size:
            raise ConfigError("task and model vocab_size must agree")


def _dataclass_from_dict(cls, data: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def run_config_from_dict(doc: dict) -> RunConfig:
    """Parse and strictly validate a RunConfig JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - {"model", "train", "task", "ablations"}
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")

    task_doc = dict(doc.get("task", {}))
    if "channels" in task_doc:
        task_doc["channels"] = tuple(
            _dataclass_from_dict(ChannelDef, dict(c), "task.channels")
            for c in task_doc["channels"]
        )
    task = _dataclass_from_dict(TaskSpec, task_doc, "task")

    model_doc = dict(doc.get("model", {}))
    if "modalities" in model_doc:
        model_doc["modalities"] = tuple(
            _dataclass_from_dict(ModalityDef, dict(m), "model.modalities")
            for m in model_doc["modalities"]
        )
    else:
        model_doc["modalities"] = task.modalities()
    if "gnn_off" in model_doc:
        model_doc["gnn_off"] = tuple(model_doc["gnn_off"])
    model_doc.setdefault("vocab_size", task.vocab_size)
    model = _dataclass_from_dict(ModelConfig, model_doc, "model")

    train = _dataclass_from_dict(TrainConfig, dict(doc.get("train", {})), "train")

    abl = doc.get("ablations", {})
    unknown = set(abl) - set(ABLATION_KEYS)
    if unknown:
        raise ConfigError(f"unknown ablation keys: {sorted(unknown)}")
    overrides = {}
    for key, value in abl.items():
        field_name = ABLATION_KEYS[key]
        overrides[field_name] = tuple(value) if field_name == "gnn_off" else value
    if overrides:
        model = replace(model, **overrides)

    cfg = RunConfig(model=model, train=train, task=task)
    cfg.validate()
    return cfg


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {"model": asdict(cfg.model), "train": asdict(cfg.train), "task": asdict(cfg.task)}
