"""Run configuration: one JSON document covering data synthesis, encoder
dims, augmentation, attack, bank, loss, training, and evaluation.

An empty document resolves to the desk-scale defaults. Unknown keys are
rejected with their path. The resolved document is echoed into every output
directory so runs are self-describing.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .attack import AttackConfig
from .augment import AugmentationSpec
from .bank import MixConfig
from .data import SynthConfig
from .encoder import EncoderDims
from .errors import ConfigError
from .losses import LossConfig


@dataclass(frozen=True)
class AblationFlags:
    attack: bool = True
    pnm: bool = True
    mc: bool = True


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    lr_drop_epochs: tuple = (20,)
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 0.999
    checkpoint_every: int = 0  # additionally checkpoint every N epochs; 0 = final only
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or not (0 <= self.sgd_momentum < 1):
            raise ConfigError("bad optimizer scalars")
        if not (0 <= self.alpha < 1):
            raise ConfigError(f"momentum coefficient must be in [0, 1), got {self.alpha}")
        drops = tuple(int(e) for e in self.lr_drop_epochs)
        if list(drops) != sorted(drops):
            raise ConfigError("lr_drop_epochs must be sorted ascending")
        object.__setattr__(self, "lr_drop_epochs", drops)


@dataclass(frozen=True)
class BankSection:
    capacity: int = 256
    beta: float = 3.0
    lambdas: tuple = (0.4, 0.3, 0.2, 0.1)
    renormalize: bool = True

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"bank capacity must be >= 1, got {self.capacity}")
        if self.beta <= 0:
            raise ConfigError(f"bank learning rate must be positive, got {self.beta}")
        MixConfig(self.lambdas, self.renormalize)  # domain check
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))


@dataclass(frozen=True)
class EvalSection:
    knn_k: int = 1
    probe_epochs: int = 80
    probe_lr: float = 0.1
    probe_batch: int = 128
    probe_momentum: float = 0.9

    def __post_init__(self):
        if self.knn_k < 1 or self.probe_epochs < 1 or self.probe_batch < 1:
            raise ConfigError("eval counts must be >= 1")
        if self.probe_lr <= 0:
            raise ConfigError("probe learning rate must be positive")


@dataclass(frozen=True)
class EncoderSection:
    embed_dim: int = 64
    hidden_dim: int = 64
    proj_hidden: int = 128
    feature_dim: int = 128
    attack_classes: int | None = None  # defaults to the dataset's class count


def _build(cls, doc: dict, path: str, **overrides):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section '{path}' must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in '{path}'")
    merged = {**doc, **overrides}
    for key in ("lambdas", "lr_drop_epochs"):
        if key in merged and isinstance(merged[key], list):
            merged[key] = tuple(merged[key])
    return cls(**merged)


def _augment_spec(doc: dict, kind: str, target_frames: int, path: str) -> AugmentationSpec:
    if "kind" in doc:
        raise ConfigError(f"'{path}.kind' is fixed by the section name")
    merged = {"target_frames": target_frames, **doc}
    return _build(AugmentationSpec, merged, path, kind=kind)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1234
    data: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    weak_augment: AugmentationSpec = None
    strong_augment: AugmentationSpec = None
    attack: AttackConfig = field(default_factory=AttackConfig)
    bank: BankSection = field(default_factory=BankSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        t = self.data.num_frames
        if self.weak_augment is None:
            object.__setattr__(self, "weak_augment",
                               AugmentationSpec(kind="weak", target_frames=t))
        if self.strong_augment is None:
            object.__setattr__(self, "strong_augment",
                               AugmentationSpec(kind="strong", target_frames=t))

    @property
    def num_attack_classes(self) -> int:
        return self.encoder.attack_classes or self.data.num_classes

    def encoder_dims(self) -> EncoderDims:
        e = self.encoder
        return EncoderDims(input_dim=self.data.num_joints * 3, embed_dim=e.embed_dim,
                           hidden_dim=e.hidden_dim, proj_hidden=e.proj_hidden,
                           feature_dim=e.feature_dim)

    def mix_config(self) -> MixConfig:
        return MixConfig(self.bank.lambdas, self.bank.renormalize)

    def with_ablation(self, attack: bool, pnm: bool, mc: bool) -> "RunConfig":
        train = dataclasses.replace(self.train, ablation=AblationFlags(attack, pnm, mc))
        return dataclasses.replace(self, train=train)

    # -- JSON (de)serialization

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        known = {"seed", "data", "encoder", "augment", "attack", "bank", "loss",
                 "train", "eval"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown} at top level")
        seed = doc.get("seed", 1234)
        if not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        data_doc = dict(doc.get("data", {}))
        data = _build(SynthConfig, {"seed": seed, **data_doc}, "data")
        aug_doc = doc.get("augment", {})
        if not isinstance(aug_doc, dict) or set(aug_doc) - {"weak", "strong"}:
            raise ConfigError("'augment' allows only 'weak' and 'strong' sections")
        weak = _augment_spec(aug_doc.get("weak", {}), "weak", data.num_frames, "augment.weak")
        strong = _augment_spec(aug_doc.get("strong", {}), "strong", data.num_frames,
                               "augment.strong")
        train_doc = dict(doc.get("train", {}))
        flags = _build(AblationFlags, train_doc.pop("ablation", {}), "train.ablation")
        return cls(
            seed=seed,
            data=data,
            encoder=_build(EncoderSection, doc.get("encoder", {}), "encoder"),
            weak_augment=weak,
            strong_augment=strong,
            attack=_build(AttackConfig, doc.get("attack", {}), "attack"),
            bank=_build(BankSection, doc.get("bank", {}), "bank"),
            loss=_build(LossConfig, doc.get("loss", {}), "loss"),
            train=_build(TrainSection, train_doc, "train", ablation=flags),
            eval=_build(EvalSection, doc.get("eval", {}), "eval"),
        )

    def to_dict(self) -> dict:
        def section(obj, drop=()):
            d = dataclasses.asdict(obj)
            for k in drop:
                d.pop(k, None)
            for k, v in d.items():
                if isinstance(v, tuple):
                    d[k] = list(v)
            return d

        train = section(self.train)
        train["lr_drop_epochs"] = list(self.train.lr_drop_epochs)
        aug_w = section(self.weak_augment, drop=("kind",))
        aug_s = section(self.strong_augment, drop=("kind",))
        return {
            "seed": self.seed,
            "data": section(self.data),
            "encoder": section(self.encoder),
            "augment": {"weak": aug_w, "strong": aug_s},
            "attack": section(self.attack),
            "bank": section(self.bank),
            "loss": section(self.loss),
            "train": train,
            "eval": section(self.eval),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
    return RunConfig.from_dict(doc)
