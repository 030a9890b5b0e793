"""Joint training of the base network, comparison network and feature GAN."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import container
from . import numcore as nc
from .advaug import AdversarialModule, ALConfig
from .metalearn import PAIRWISE_LOSSES, ComparisonNet, build_meta_task, pairwise_loss
from .model import FFCSN, AblationFlags, ModelConfig, TINY, loss_base, one_hot
from .synthgen import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ["epoch", "lr", "l_base", "l_ml", "l_al", "l_total", "train_acc"]


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    beta1: float = 1.0
    beta2: float = 1.0
    base_lr: float = 0.0005
    lr_step: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.01
    max_epochs: int = 100
    batch_size: int = 12
    K: int = 3
    P: int = 5
    pairwise_loss: str = "relation"
    margin: float = 1.0
    g_channels: Tuple[int, int] = (512, 128)
    g_grad_clip: float = 0.0  # max gradient norm of the comparison network; 0 disables clipping
    seed: int = 0
    flags: AblationFlags = field(default_factory=AblationFlags)
    model: ModelConfig = field(default_factory=ModelConfig)
    al: ALConfig = field(default_factory=ALConfig)

    def __post_init__(self):
        self.g_channels = tuple(int(c) for c in self.g_channels)
        if isinstance(self.flags, dict):
            self.flags = AblationFlags(**self.flags)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.al, dict):
            self.al = ALConfig(**self.al)

    def validate(self) -> None:
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta1 and beta2 must be non-negative")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.flags.ml and self.batch_size <= self.P:
            raise ValueError(f"batch_size {self.batch_size} must exceed task size P={self.P}")
        if self.pairwise_loss not in PAIRWISE_LOSSES:
            raise ValueError(f"pairwise_loss must be one of {PAIRWISE_LOSSES}")
        if self.g_grad_clip < 0:
            raise ValueError("g_grad_clip must be >= 0")
        if self.lr_step < 1:
            raise ValueError("lr_step must be >= 1")
        if self.al.feature_dim != self.model.bottleneck:
            raise ValueError(f"al.feature_dim {self.al.feature_dim} != model bottleneck {self.model.bottleneck}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g_channels"] = list(self.g_channels)
        d["model"] = self.model.to_dict()
        d["al"] = self.al.to_dict()
        d["flags"] = self.flags.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset used by the acceptance experiments.

        The learning rate is 100x the default; weight decay is scaled down by the same
        factor so the per-step shrinkage lr * weight_decay matches the default schedule.
        At this rate occasional large gradients push the comparison network into a constant
        output it never leaves, so its gradient norm is clipped to 1.
        """
        base = dict(
            base_lr=0.05,
            weight_decay=1e-4,
            lr_step=40,
            max_epochs=60,
            g_channels=(16, 8),
            g_grad_clip=1.0,
            model=ModelConfig(**TINY),
        )
        base.update(overrides)
        return cls(**base)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: base_lr * 10^-floor(epoch / lr_step)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * 10.0 ** (-(epoch // cfg.lr_step))


def total_loss(l_base, l_ml, l_al, beta1: float, beta2: float, flags: AblationFlags):
    """L_BASE + beta1 L_ML + beta2 L_AL, omitting disabled terms entirely."""
    total = l_base
    if flags.ml and l_ml is not None:
        total = total + beta1 * l_ml
    if flags.al and l_al is not None:
        total = total + beta2 * l_al
    return total


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_base: float
    l_ml: Optional[float]
    l_al: Optional[float]
    l_total: float
    train_acc: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def column(self, name: str) -> List[Optional[float]]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + ["" if getattr(r, c) is None else repr(float(getattr(r, c)))
                                    for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != HISTORY_COLUMNS:
            raise ValueError("history CSV header mismatch")
        recs = []
        for row in rows[1:]:
            vals = [None if v == "" else float(v) for v in row[1:]]
            recs.append(EpochRecord(int(row[0]), *vals))
        return cls(recs)

    def to_json(self) -> list:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_json(cls, rows: list) -> "TrainHistory":
        return cls([EpochRecord(**r) for r in rows])


class Networks:
    """Every trainable component for one run, built deterministically from the config."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.model = FFCSN(cfg.model, cfg.flags, rng)
        self.comparison: Optional[ComparisonNet] = None
        self.adversarial: Optional[AdversarialModule] = None
        if cfg.flags.ml and cfg.pairwise_loss == "relation":
            self.comparison = ComparisonNet(2 * self.model.map_depth, cfg.model.map_hw, rng,
                                            channels=cfg.g_channels, init_std=cfg.model.init_std, init=cfg.model.init,
                                            dtype=cfg.model.dtype)
        if cfg.flags.al:
            self.adversarial = AdversarialModule(cfg.al, rng, cfg.model.dtype)

    def components(self) -> Dict[str, nc.Module]:
        out: Dict[str, nc.Module] = {"model": self.model}
        if self.comparison is not None:
            out["comparison"] = self.comparison
        if self.adversarial is not None:
            out["adversarial"] = self.adversarial
        return out

    def train(self, mode: bool = True) -> None:
        for m in self.components().values():
            m.train(mode)


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    networks: Networks
    rng: np.random.Generator
    train_identities: List[int]
    history: TrainHistory = field(default_factory=TrainHistory)

    @property
    def model(self) -> FFCSN:
        return self.networks.model

    def to_entries(self) -> "Dict[str, np.ndarray]":
        entries: Dict[str, np.ndarray] = {
            "meta/config": container.pack_json(self.config.to_dict()),
            "meta/epoch": np.array([self.epoch], dtype=np.float64),
            "meta/rng_state": container.pack_json(_rng_state(self.rng)),
            "meta/train_identities": np.array(self.train_identities, dtype=np.float64),
            "meta/history": container.pack_json(self.history.to_json()),
        }
        for prefix, module in self.networks.components().items():
            for name, arr in module.state_dict().items():
                entries[f"{prefix}/{name}"] = arr
            for name, p in module.named_parameters():
                entries[f"momentum/{prefix}/{name}"] = p.momentum_buffer
        return entries

    def save(self, path) -> None:
        container.save(path, self.to_entries())

    @classmethod
    def load(cls, path, expected: Optional[TrainConfig] = None) -> "Checkpoint":
        try:
            entries = container.load(path)
        except container.ContainerError as exc:
            raise CheckpointError(str(exc)) from exc
        return cls.from_entries(entries, expected, source=str(path))

    @classmethod
    def from_entries(cls, entries, expected: Optional[TrainConfig] = None, source: str = "<checkpoint>"):
        for key in ("meta/config", "meta/epoch", "meta/rng_state", "meta/train_identities"):
            if key not in entries:
                raise CheckpointError(f"{source}: missing entry '{key}'")
        cfg = TrainConfig.from_dict(container.unpack_json(entries["meta/config"]))
        if expected is not None:
            cfg = expected
        nets = Networks(cfg, np.random.default_rng(0))
        comps = nets.components()
        grouped: Dict[str, Dict[str, np.ndarray]] = {p: {} for p in comps}
        momenta: Dict[str, Dict[str, np.ndarray]] = {p: {} for p in comps}
        for key, arr in entries.items():
            if key.startswith("meta/"):
                continue
            head, _, rest = key.partition("/")
            if head == "momentum":
                comp, _, name = rest.partition("/")
                if comp not in momenta:
                    raise CheckpointError(f"{source}: unknown parameter name '{key}'")
                momenta[comp][name] = arr
            elif head in grouped:
                grouped[head][rest] = arr
            else:
                raise CheckpointError(f"{source}: unknown parameter name '{key}'")
        for prefix, module in comps.items():
            try:
                module.load_state_dict(grouped[prefix])
            except (KeyError, nc.ShapeError) as exc:
                raise CheckpointError(f"{source}: {prefix}: {exc}") from exc
            params = dict(module.named_parameters())
            for name, p in params.items():
                buf = momenta[prefix].get(name)
                if buf is None or buf.shape != p.shape:
                    raise CheckpointError(f"{source}: bad momentum buffer for '{prefix}/{name}'")
                p.momentum_buffer[...] = buf
        rng = np.random.default_rng()
        rng.bit_generator.state = container.unpack_json(entries["meta/rng_state"])
        history = TrainHistory.from_json(container.unpack_json(entries["meta/history"])) \
            if "meta/history" in entries else TrainHistory()
        return cls(cfg, int(entries["meta/epoch"][0]), nets, rng,
                   [int(v) for v in entries["meta/train_identities"]], history)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path, expected: Optional[TrainConfig] = None) -> Checkpoint:
    return Checkpoint.load(path, expected)


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def _finite(value: float, epoch: int, batch: int, what: str) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} ({value}) at epoch {epoch}, batch {batch}")
    return value


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def train(config: TrainConfig, dataset: Dataset, train_indices: Sequence[int],
          resume: Optional[Checkpoint] = None, checkpoint_path=None) -> Tuple[Checkpoint, TrainHistory]:
    """Train for ``config.max_epochs`` epochs (continuing from ``resume`` if given).

    Only samples listed in ``train_indices`` are read from ``dataset``.
    """
    config.validate()
    train_indices = np.asarray(list(train_indices), dtype=int)
    if train_indices.size == 0:
        raise TrainingError("empty training set")
    labels_all = dataset.labels
    idents = sorted({int(i) for i in dataset.identity_ids[train_indices]})

    if resume is None:
        rng = np.random.default_rng(config.seed)
        nets = Networks(config, rng)
        ckpt = Checkpoint(config, 0, nets, rng, idents)
    else:
        ckpt = resume
        rng, nets = ckpt.rng, ckpt.networks
    history = ckpt.history
    flags = config.flags
    model = nets.model

    for epoch in range(ckpt.epoch, config.max_epochs):
        lr = lr_at(epoch, config)
        nets.train(True)
        order = train_indices[rng.permutation(len(train_indices))]
        stats: Dict[str, List[float]] = {"base": [], "ml": [], "al": [], "total": []}
        correct = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            videos = [dataset[int(i)] for i in idx]
            y = labels_all[idx]
            out = model.forward_videos(videos, config.K, rng, train=True)
            l_base = loss_base(one_hot(y, config.model.n_classes), out.E)
            objective = l_base
            params = model.parameters()
            l_ml_v = l_al_v = None

            if flags.ml and len(idx) > config.P:
                task = build_meta_task(y, config.P, rng)
                video_feats = out.bottleneck.reshape(len(idx), config.K, -1).mean(axis=1)
                l_ml = pairwise_loss(config.pairwise_loss, nets.comparison, out.feature_maps, video_feats,
                                     task, config.margin)
                if l_ml is not None:
                    l_ml_v = _finite(float(l_ml.data), epoch, b, "L_ML")
                    objective = objective + config.beta1 * l_ml
                    if nets.comparison is not None:
                        params = params + nets.comparison.parameters()

            if flags.al:
                real = out.bottleneck.data.reshape(len(idx), config.K, -1).mean(axis=1)
                al_stats = nets.adversarial.step(real, rng, lr, config.momentum, config.weight_decay)
                l_al_v = _finite(al_stats["l_al"], epoch, b, "L_AL")

            l_base_v = _finite(float(l_base.data), epoch, b, "L_BASE")
            for p in params:
                p.grad = None
            objective.backward()
            if config.g_grad_clip > 0 and l_ml_v is not None and nets.comparison is not None:
                nc.clip_grad_norm(nets.comparison.parameters(), config.g_grad_clip)
            nc.sgd_step(params, lr, config.momentum, config.weight_decay)

            stats["base"].append(l_base_v)
            if l_ml_v is not None:
                stats["ml"].append(l_ml_v)
            if l_al_v is not None:
                stats["al"].append(l_al_v)
            stats["total"].append(float(total_loss(l_base_v, l_ml_v, l_al_v, config.beta1, config.beta2, flags)))
            correct += int((out.E.data.argmax(axis=1) == y).sum())

        history.records.append(EpochRecord(
            epoch=epoch, lr=lr, l_base=_mean(stats["base"]),
            l_ml=_mean(stats["ml"]) if flags.ml else None,
            l_al=_mean(stats["al"]) if flags.al else None,
            l_total=_mean(stats["total"]), train_acc=correct / len(order),
        ))
        ckpt.epoch = epoch + 1
        log.debug("epoch %d lr %.2e total %.4f acc %.3f", epoch, lr, history.records[-1].l_total,
                  history.records[-1].train_acc)

    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
    return ckpt, history
