"""Training loop, staged path-type pretraining, and checkpointing.

Plain training runs SGD over shuffled bag batches. The adaptive
pretraining schedule runs the same loop repeatedly with the path bag
restricted to one path type per stage (sentences always included),
carrying parameters across stage boundaries and checkpointing after
each stage; the final stage always trains on all path types. A plan of
the single stage ("All", epochs) is exactly plain training, consuming
the RNG stream identically.

One generator seeds everything in a fixed order: parameter init, then
per epoch the shuffle, then per bag the dropout masks. Path sampling
happens offline in the dataset, so (config, seed, data) determines the
checkpoint bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import numerics as nm
from . import ug_store
from .attention_model import Model, ModelConfig, build_model, joint_loss
from .data_io import Bag, Dataset
from .encoders import Vocab, apply_pretrained_embeddings

ALL_PATHS = "All"
STAGE_FILTERS = (ug_store.TEXTUAL, ug_store.HYBRID, ug_store.KG, ALL_PATHS)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """Loss or gradient went non-finite; message names the batch."""


@dataclass
class TrainConfig:
    lr_net: float = 0.02
    lr_kg: float = 0.05
    batch_size: int = 50
    dropout: float = 0.5
    epochs: int = 15
    seed: int = 13
    mode: str = "base"
    pretrain: bool = False
    pretrain_epochs: int = 3
    j: int = 50
    lambda1: float = 1.0
    lambda2: float = 1.0
    norm: str = "l2"
    b: float = 7.0
    maxdist: int = 30
    word_dim: int = 50
    kg_dim: int = 50
    pos_dim: int = 5
    window: int = 3
    filters: int = 100
    rht_grad: bool = False
    word_emb_file: str | None = None

    def validate(self) -> None:
        if self.lr_net <= 0 or self.lr_kg <= 0:
            raise ConfigError("learning rates must be positive")
        for name in ("batch_size", "epochs", "pretrain_epochs", "j", "maxdist",
                     "word_dim", "kg_dim", "pos_dim", "filters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{_KEY_OF[name]} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window must be odd and positive")
        if self.mode not in ("base", "ranking"):
            raise ConfigError(f"mode must be base or ranking, got {self.mode!r}")
        if self.norm not in ("l2", "l1"):
            raise ConfigError(f"norm must be l2 or l1, got {self.norm!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            mode=self.mode,
            word_dim=self.word_dim,
            pos_dim=self.pos_dim,
            kg_dim=self.kg_dim,
            filters=self.filters,
            window=self.window,
            maxdist=self.maxdist,
            dropout=self.dropout,
            j=self.j,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            norm=self.norm,
            b=self.b,
            rht_grad=self.rht_grad,
        )


# Config-file keys; the complexity knobs use their dotted public names.
_KEY_OF = {f.name: f.name for f in fields(TrainConfig)}
_KEY_OF.update({"j": "complexity.j", "lambda1": "complexity.lambda1",
                "lambda2": "complexity.lambda2"})
_FIELD_OF = {v: k for k, v in _KEY_OF.items()}
_FLOAT_FIELDS = {"lr_net", "lr_kg", "dropout", "lambda1", "lambda2", "b"}
_INT_FIELDS = {"batch_size", "epochs", "seed", "pretrain_epochs", "j", "maxdist",
               "word_dim", "kg_dim", "pos_dim", "window", "filters"}
_BOOL_FIELDS = {"pretrain", "rht_grad"}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str, key: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"key {key!r}: expected on/off, got {text!r}")


def config_text(config: TrainConfig) -> str:
    """Canonical flat key = value rendering, sorted by key."""
    lines = []
    for f in fields(TrainConfig):
        lines.append(f"{_KEY_OF[f.name]} = {_format_value(getattr(config, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(config: TrainConfig) -> str:
    return nm.config_fingerprint(config_text(config))


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_text(config))


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _FIELD_OF:
            raise ConfigError(f"{source}:{lineno}: unknown configuration key {key!r}")
        name = _FIELD_OF[key]
        if name in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            if name == "word_emb_file":
                values[name] = None if val.lower() == "none" else val
            elif name in _BOOL_FIELDS:
                values[name] = _parse_bool(val, key)
            elif name in _INT_FIELDS:
                values[name] = int(val)
            elif name in _FLOAT_FIELDS:
                values[name] = float(val)
            else:
                values[name] = val
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(
                f"{source}:{lineno}: key {key!r}: cannot parse value {val!r}"
            ) from None
    config = TrainConfig(**values)
    config.validate()
    return config


def load_config(path) -> TrainConfig:
    if not os.path.exists(path):
        raise ConfigError(f"missing configuration file: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


# ---------------------------------------------------------------------------
# Stage plans.
# ---------------------------------------------------------------------------


@dataclass
class StagePlan:
    """Ordered (path filter, epoch count) stages; the last uses all paths."""

    stages: list[tuple[str, int]]

    def __post_init__(self) -> None:
        if not self.stages:
            raise ConfigError("a stage plan needs at least one stage")
        for pfilter, count in self.stages:
            if pfilter not in STAGE_FILTERS:
                raise ConfigError(
                    f"unknown path filter {pfilter!r} (expected one of {STAGE_FILTERS})"
                )
            if count < 1:
                raise ConfigError("stage epoch counts must be >= 1")
        if self.stages[-1][0] != ALL_PATHS:
            raise ConfigError(f"the final stage must use {ALL_PATHS!r} paths")

    @classmethod
    def single(cls, epochs: int) -> "StagePlan":
        return cls([(ALL_PATHS, epochs)])

    @classmethod
    def default(cls, config: TrainConfig) -> "StagePlan":
        e = config.pretrain_epochs
        return cls(
            [
                (ug_store.TEXTUAL, e),
                (ug_store.HYBRID, e),
                (ug_store.KG, e),
                (ALL_PATHS, config.epochs),
            ]
        )


def filter_bag_paths(bag: Bag, path_filter: str) -> Bag:
    """Restrict the path bag to one type; sentences are untouched."""
    if path_filter not in STAGE_FILTERS:
        raise ConfigError(f"unknown path filter {path_filter!r}")
    if path_filter == ALL_PATHS:
        return bag
    return replace(bag, paths=[p for p in bag.paths if p.path_type == path_filter])


# ---------------------------------------------------------------------------
# The loop.
# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    tag: str
    epoch_losses: list[float]
    checkpoint: bytes
    path_type_counts: dict[str, int]


@dataclass
class TrainResult:
    model: Model
    stages: list[StageResult]
    trace: list[tuple[int, str, float]]
    config_hash: str

    @property
    def final_checkpoint(self) -> bytes:
        return self.stages[-1].checkpoint


def _stage_tag(path_filter: str) -> str:
    return path_filter.lower()


def _run_stages(
    config: TrainConfig,
    plan: StagePlan,
    dataset: Dataset,
    out_dir=None,
) -> TrainResult:
    config.validate()
    if not dataset.train_bags:
        raise TrainingError("dataset has no training bags")
    rng = np.random.default_rng(config.seed)
    vocab = Vocab.build(dataset.token_sources())
    model = build_model(
        config.model_config(), sorted(dataset.entities), dataset.relations, vocab, rng
    )
    if config.word_emb_file:
        apply_pretrained_embeddings(model.net.word_emb, vocab, config.word_emb_file)
    chash = config_hash(config)

    trace: list[tuple[int, str, float]] = []
    stage_results: list[StageResult] = []
    global_epoch = 0
    for path_filter, n_epochs in plan.stages:
        tag = _stage_tag(path_filter)
        counter: dict[str, int] = {}
        stage_bags = [filter_bag_paths(b, path_filter) for b in dataset.train_bags]
        epoch_losses: list[float] = []
        for _ in range(n_epochs):
            order = rng.permutation(len(stage_bags))
            batch_losses: list[float] = []
            for bstart in range(0, len(order), config.batch_size):
                batch = [stage_bags[i] for i in order[bstart:bstart + config.batch_size]]
                batch_id = f"epoch {global_epoch}, batch {bstart // config.batch_size}"
                tape = nm.Tape()
                try:
                    loss, _ = joint_loss(
                        tape, batch, model,
                        dropout_rng=rng,
                        path_type_counter=counter,
                    )
                    tape.backward(loss)
                    nm.sgd_step(model.slots(), config.lr_kg, config.lr_net)
                except nm.NonFiniteError as exc:
                    raise TrainingDiverged(f"{batch_id}: {exc}") from exc
                batch_losses.append(loss.item())
            mean_loss = float(np.mean(batch_losses))
            epoch_losses.append(mean_loss)
            trace.append((global_epoch, tag, mean_loss))
            global_epoch += 1
        ckpt = nm.checkpoint_bytes(model.slots(), config_hash=chash, stage=tag)
        stage_results.append(StageResult(tag, epoch_losses, ckpt, counter))

    result = TrainResult(model, stage_results, trace, chash)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def train(config: TrainConfig, dataset: Dataset, out_dir=None) -> TrainResult:
    """Plain training: a single all-paths stage."""
    return _run_stages(config, StagePlan.single(config.epochs), dataset, out_dir)


def run_pretrain_schedule(
    plan: StagePlan, config: TrainConfig, dataset: Dataset, out_dir=None
) -> TrainResult:
    return _run_stages(config, plan, dataset, out_dir)


def train_with_config(config: TrainConfig, dataset: Dataset, out_dir=None) -> TrainResult:
    if config.pretrain:
        return run_pretrain_schedule(StagePlan.default(config), config, dataset, out_dir)
    return train(config, dataset, out_dir)


def write_outputs(result: TrainResult, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i, stage in enumerate(result.stages):
        with open(os.path.join(out_dir, f"stage_{i}_{stage.tag}.ckpt"), "wb") as fh:
            fh.write(stage.checkpoint)
    with open(os.path.join(out_dir, "model.ckpt"), "wb") as fh:
        fh.write(result.final_checkpoint)
    with open(os.path.join(out_dir, "loss_trace.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,stage,loss\n")
        for epoch, tag, loss in result.trace:
            fh.write(f"{epoch},{tag},{loss!r}\n")


def load_model(config: TrainConfig, dataset: Dataset, checkpoint_path) -> Model:
    """Rebuild the model for a dataset and restore checkpointed weights."""
    config.validate()
    if not os.path.exists(checkpoint_path):
        raise TrainingError(f"missing checkpoint: {checkpoint_path}")
    meta, arrays = nm.load_checkpoint(checkpoint_path)
    expected = config_hash(config)
    if meta.get("config_hash") and meta["config_hash"] != expected:
        raise TrainingError(
            "checkpoint was written under a different configuration "
            f"(hash {meta['config_hash'][:12]}.. != {expected[:12]}..)"
        )
    vocab = Vocab.build(dataset.token_sources())
    model = build_model(
        config.model_config(),
        sorted(dataset.entities),
        dataset.relations,
        vocab,
        np.random.default_rng(config.seed),
    )
    nm.restore_params(model.slots(), arrays)
    return model
