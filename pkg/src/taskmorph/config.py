"""Experiment configuration: strict parsing, canonical serialization, and
dotted-path overrides.

Configs are nested key-value documents. Parsing is strict in both
directions: a missing required field and an unknown field both fail with
the full dotted path of the offending key. Privacy-relevant fields (the
clip threshold, the noise multiplier or epsilon target, delta, and the
similarity-penalty weight) are always explicit; nothing privacy-related
has a default.
"""

from __future__ import annotations

from dataclasses import dataclass

import yaml

from .errors import ConfigurationError
from .models import BackboneSpec, Crossing, MetamorphConfig, TaskKind
from .objectives import LossWeights
from .training import RegimeKind, TaskSpec, TrainingRegime, validate_tasks

_MISSING = object()

_SCENE_KINDS = ("classification_pair", "dense_pair")


class _Reader:
    """Pop-and-validate view over one mapping level of a config document."""

    def __init__(self, mapping, path: str):
        if not isinstance(mapping, dict):
            label = path or "config"
            raise ConfigurationError(
                f"{label}: expected a mapping, got {type(mapping).__name__}"
            )
        self._map = dict(mapping)
        self._path = path

    def _at(self, key: str) -> str:
        return f"{self._path}.{key}" if self._path else key

    def take(self, key: str, kind: str, default=_MISSING):
        if key not in self._map:
            if default is _MISSING:
                raise ConfigurationError(f"{self._at(key)}: required field is missing")
            return default
        return _coerce(self._map.pop(key), kind, self._at(key))

    def section(self, key: str, required: bool = True):
        if key not in self._map:
            if required:
                raise ConfigurationError(f"{self._at(key)}: required section is missing")
            return None
        value = self._map.pop(key)
        return _Reader(value, self._at(key))

    def list_of_sections(self, key: str):
        if key not in self._map:
            raise ConfigurationError(f"{self._at(key)}: required section is missing")
        value = self._map.pop(key)
        if not isinstance(value, list) or not value:
            raise ConfigurationError(f"{self._at(key)}: expected a nonempty list")
        return [_Reader(item, f"{self._at(key)}[{i}]") for i, item in enumerate(value)]

    def finish(self) -> None:
        if self._map:
            unknown = sorted(self._map)[0]
            raise ConfigurationError(f"{self._at(unknown)}: unknown field")


def _coerce(value, kind: str, path: str):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str) or not value:
            raise ConfigurationError(f"{path}: expected a nonempty string, got {value!r}")
        return value
    if kind == "list_int":
        if not isinstance(value, list) or not value:
            raise ConfigurationError(f"{path}: expected a nonempty list of integers")
        return tuple(_coerce(v, "int", f"{path}[{i}]") for i, v in enumerate(value))
    if kind == "list_float":
        if not isinstance(value, list) or not value:
            raise ConfigurationError(f"{path}: expected a nonempty list of numbers")
        return tuple(_coerce(v, "float", f"{path}[{i}]") for i, v in enumerate(value))
    raise ValueError(f"unhandled coercion kind {kind}")


# ---------------------------------------------------------------------------
# config blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetBlock:
    kind: str
    image_size: tuple[int, int]
    train_count: int
    eval_count: int
    num_shapes: int
    shape_classes: int
    color_classes: int
    noise_level: float
    size_color_correlation: float
    seed: int
    eval_seed: int


@dataclass(frozen=True)
class BackboneBlock:
    channels: tuple[int, ...]
    strides: tuple[int, ...]
    split_index: int

    def spec(self, image_size: tuple[int, int]) -> BackboneSpec:
        blocks = tuple(
            ("conv", c, s) for c, s in zip(self.channels, self.strides)
        )
        return BackboneSpec(
            blocks=blocks,
            split_index=self.split_index,
            input_shape=(3, image_size[0], image_size[1]),
        )


@dataclass(frozen=True)
class TrainingBlock:
    batch_size: int
    lr: float
    phase2_lr: float | None
    select_best: bool


@dataclass(frozen=True)
class DPBlock:
    clip_threshold: float
    target_delta: float
    noise_multiplier: float | None
    target_epsilon: float | None


@dataclass(frozen=True)
class RuntimeBlock:
    host: str
    port: int
    key: str
    session_id: int
    use_f16: bool
    timeout_s: float


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    dataset: DatasetBlock
    backbone: BackboneBlock
    tasks: tuple[TaskSpec, ...]
    metamorph: MetamorphConfig
    weights: LossWeights
    regime: TrainingRegime
    training: TrainingBlock
    dp: DPBlock | None
    runtime: RuntimeBlock | None

    def backbone_spec(self) -> BackboneSpec:
        return self.backbone.spec(self.dataset.image_size)

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise ConfigurationError(
            f"unknown task {task_id!r}; have {[t.task_id for t in self.tasks]}"
        )

    def private_task(self) -> TaskSpec | None:
        private = [t for t in self.tasks if t.is_private]
        return private[0] if private else None


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _parse_dataset(reader: _Reader) -> DatasetBlock:
    kind = reader.take("kind", "str")
    if kind not in _SCENE_KINDS:
        raise ConfigurationError(
            f"dataset.kind: expected one of {list(_SCENE_KINDS)}, got {kind!r}"
        )
    size = reader.take("image_size", "list_int", (32, 32))
    if len(size) != 2:
        raise ConfigurationError("dataset.image_size: expected [height, width]")
    block = DatasetBlock(
        kind=kind,
        image_size=(size[0], size[1]),
        train_count=reader.take("train_count", "int"),
        eval_count=reader.take("eval_count", "int"),
        num_shapes=reader.take("num_shapes", "int", 3),
        shape_classes=reader.take("shape_classes", "int", 2),
        color_classes=reader.take("color_classes", "int", 2),
        noise_level=reader.take("noise_level", "float", 0.04),
        size_color_correlation=reader.take("size_color_correlation", "float", 0.3),
        seed=reader.take("seed", "int", 0),
        eval_seed=reader.take("eval_seed", "int", 1),
    )
    reader.finish()
    if block.train_count < 1 or block.eval_count < 1:
        raise ConfigurationError("dataset: train_count and eval_count must be positive")
    return block


def _parse_backbone(reader: _Reader) -> BackboneBlock:
    channels = reader.take("channels", "list_int")
    strides = reader.take("strides", "list_int", tuple([2] + [1] * (len(channels) - 1)))
    split_index = reader.take("split_index", "int")
    reader.finish()
    if len(strides) != len(channels):
        raise ConfigurationError(
            f"backbone.strides: expected {len(channels)} entries to match channels, "
            f"got {len(strides)}"
        )
    return BackboneBlock(channels=channels, strides=strides, split_index=split_index)


def _parse_tasks(readers) -> tuple[TaskSpec, ...]:
    tasks = []
    for r in readers:
        task_id = r.take("task_id", "str")
        kind = r.take("kind", "str")
        try:
            task_kind = TaskKind(kind)
        except ValueError:
            raise ConfigurationError(
                f"{r._at('kind')}: expected one of "
                f"{[k.value for k in TaskKind]}, got {kind!r}"
            ) from None
        tasks.append(
            TaskSpec(
                task_id=task_id,
                kind=task_kind,
                num_outputs=r.take("num_outputs", "int"),
                is_private=r.take("is_private", "bool", False),
            )
        )
        r.finish()
    return tuple(tasks)


def _parse_metamorph(reader: _Reader | None) -> MetamorphConfig:
    if reader is None:
        return MetamorphConfig()
    crossing = reader.take("crossing", "str", Crossing.CROSS.value)
    try:
        crossing = Crossing(crossing)
    except ValueError:
        raise ConfigurationError(
            f"metamorph.crossing: expected one of "
            f"{[c.value for c in Crossing]}, got {crossing!r}"
        ) from None
    config = MetamorphConfig(
        k=reader.take("k", "int", 2),
        reduction_ratio=reader.take("reduction_ratio", "int", 4),
        crossing=crossing,
    )
    reader.finish()
    return config


def _parse_weights(reader: _Reader, trained_count: int) -> LossWeights:
    omega = reader.take("omega", "float")
    per_task = reader.take("per_task", "list_float", tuple([1.0] * trained_count))
    reader.finish()
    if len(per_task) != trained_count:
        raise ConfigurationError(
            f"weights.per_task: expected {trained_count} entries "
            "(one per jointly trained task), got "
            f"{len(per_task)}"
        )
    return LossWeights(omega, tuple(per_task))


def _parse_regime(reader: _Reader, seed: int) -> TrainingRegime:
    kind = reader.take("kind", "str")
    try:
        regime_kind = RegimeKind[kind.upper()]
    except KeyError:
        raise ConfigurationError(
            f"regime.kind: expected one of "
            f"{[k.name.lower() for k in RegimeKind]}, got {kind!r}"
        ) from None
    regime = TrainingRegime(
        kind=regime_kind,
        phase1_epochs=reader.take("phase1_epochs", "int", 0),
        phase2_epochs=reader.take("phase2_epochs", "int", 0),
        freeze_encoder_phase2=reader.take("freeze_encoder_phase2", "bool", True),
        seed=seed,
    )
    reader.finish()
    return regime


def _parse_training(reader: _Reader) -> TrainingBlock:
    block = TrainingBlock(
        batch_size=reader.take("batch_size", "int"),
        lr=reader.take("lr", "float"),
        phase2_lr=reader.take("phase2_lr", "float", None),
        select_best=reader.take("select_best", "bool", True),
    )
    reader.finish()
    if block.batch_size < 1:
        raise ConfigurationError("training.batch_size: must be positive")
    if block.lr <= 0:
        raise ConfigurationError("training.lr: must be positive")
    return block


def _parse_dp(reader: _Reader | None) -> DPBlock | None:
    if reader is None:
        return None
    block = DPBlock(
        clip_threshold=reader.take("clip_threshold", "float"),
        target_delta=reader.take("target_delta", "float"),
        noise_multiplier=reader.take("noise_multiplier", "float", None),
        target_epsilon=reader.take("target_epsilon", "float", None),
    )
    reader.finish()
    if block.noise_multiplier is None and block.target_epsilon is None:
        raise ConfigurationError(
            "dp: either noise_multiplier or target_epsilon must be given"
        )
    if block.clip_threshold <= 0:
        raise ConfigurationError("dp.clip_threshold: must be positive")
    if not 0 < block.target_delta < 1:
        raise ConfigurationError("dp.target_delta: must be in (0, 1)")
    if block.noise_multiplier is not None and block.noise_multiplier < 0:
        raise ConfigurationError("dp.noise_multiplier: must be nonnegative")
    if block.target_epsilon is not None and block.target_epsilon <= 0:
        raise ConfigurationError("dp.target_epsilon: must be positive")
    return block


def _parse_runtime(reader: _Reader | None) -> RuntimeBlock | None:
    if reader is None:
        return None
    block = RuntimeBlock(
        host=reader.take("host", "str", "127.0.0.1"),
        port=reader.take("port", "int"),
        key=reader.take("key", "str"),
        session_id=reader.take("session_id", "int", 0),
        use_f16=reader.take("use_f16", "bool", False),
        timeout_s=reader.take("timeout_s", "float", 30.0),
    )
    reader.finish()
    if not 0 <= block.port <= 65535:
        raise ConfigurationError(f"runtime.port: expected 0..65535, got {block.port}")
    return block


def parse_config(document: dict) -> ExperimentConfig:
    """Validate a raw nested mapping into a typed experiment config."""
    root = _Reader(document, "")
    seed = root.take("seed", "int", 0)
    output_dir = root.take("output_dir", "str", "runs")
    dataset = _parse_dataset(root.section("dataset"))
    backbone = _parse_backbone(root.section("backbone"))
    tasks = _parse_tasks(root.list_of_sections("tasks"))
    metamorph = _parse_metamorph(root.section("metamorph", required=False))
    regime = _parse_regime(root.section("regime"), seed)
    validate_tasks(regime.kind, tasks)
    # Per-task weights align with the tasks trained jointly: every task in
    # the plain joint regime, only the public ones when the private task is
    # trained in its own sanitized phase.
    if regime.kind is RegimeKind.TWO_PHASE:
        trained_count = sum(1 for t in tasks if not t.is_private)
    else:
        trained_count = len(tasks)
    weights = _parse_weights(root.section("weights"), trained_count)
    training = _parse_training(root.section("training"))
    dp = _parse_dp(root.section("dp", required=False))
    runtime = _parse_runtime(root.section("runtime", required=False))
    root.finish()

    if regime.kind is not RegimeKind.TASK_PRIVACY_ONLY and dp is None:
        raise ConfigurationError(
            f"dp: required section is missing for regime {regime.kind.name.lower()} "
            "(clip threshold, noise level, and delta must be explicit)"
        )
    if regime.kind is RegimeKind.INPUT_OBFUSCATION_ONLY:
        if regime.phase1_epochs < 1:
            raise ConfigurationError(
                "regime.phase1_epochs: must be positive for this regime"
            )
        if len(tasks) != 1:
            raise ConfigurationError(
                "tasks: sanitized single-task training takes exactly one task, "
                f"got {len(tasks)}"
            )
    if regime.kind is RegimeKind.TASK_PRIVACY_ONLY and regime.phase2_epochs < 1:
        raise ConfigurationError("regime.phase2_epochs: must be positive for this regime")
    if regime.kind is RegimeKind.TWO_PHASE and regime.phase1_epochs < 1:
        raise ConfigurationError(
            "regime.phase1_epochs: the sanitized phase needs at least one epoch"
        )
    spec = backbone.spec(dataset.image_size)
    split_channels = spec.split_shape[0]
    if split_channels % metamorph.k:
        raise ConfigurationError(
            f"metamorph.k: {metamorph.k} does not divide the "
            f"{split_channels} channels at the split"
        )
    return ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        dataset=dataset,
        backbone=backbone,
        tasks=tasks,
        metamorph=metamorph,
        weights=weights,
        regime=regime,
        training=training,
        dp=dp,
        runtime=runtime,
    )


# ---------------------------------------------------------------------------
# serialization and overrides
# ---------------------------------------------------------------------------


def config_to_dict(config: ExperimentConfig) -> dict:
    """Canonical raw-mapping form; parse_config inverts it exactly."""
    doc = {
        "seed": config.seed,
        "output_dir": config.output_dir,
        "dataset": {
            "kind": config.dataset.kind,
            "image_size": list(config.dataset.image_size),
            "train_count": config.dataset.train_count,
            "eval_count": config.dataset.eval_count,
            "num_shapes": config.dataset.num_shapes,
            "shape_classes": config.dataset.shape_classes,
            "color_classes": config.dataset.color_classes,
            "noise_level": config.dataset.noise_level,
            "size_color_correlation": config.dataset.size_color_correlation,
            "seed": config.dataset.seed,
            "eval_seed": config.dataset.eval_seed,
        },
        "backbone": {
            "channels": list(config.backbone.channels),
            "strides": list(config.backbone.strides),
            "split_index": config.backbone.split_index,
        },
        "tasks": [
            {
                "task_id": t.task_id,
                "kind": t.kind.value,
                "num_outputs": t.num_outputs,
                "is_private": t.is_private,
            }
            for t in config.tasks
        ],
        "metamorph": {
            "k": config.metamorph.k,
            "reduction_ratio": config.metamorph.reduction_ratio,
            "crossing": config.metamorph.crossing.value,
        },
        "weights": {
            "omega": config.weights.omega,
            "per_task": list(config.weights.per_task),
        },
        "regime": {
            "kind": config.regime.kind.name.lower(),
            "phase1_epochs": config.regime.phase1_epochs,
            "phase2_epochs": config.regime.phase2_epochs,
            "freeze_encoder_phase2": config.regime.freeze_encoder_phase2,
        },
        "training": {
            "batch_size": config.training.batch_size,
            "lr": config.training.lr,
            "select_best": config.training.select_best,
        },
    }
    if config.training.phase2_lr is not None:
        doc["training"]["phase2_lr"] = config.training.phase2_lr
    if config.dp is not None:
        dp = {
            "clip_threshold": config.dp.clip_threshold,
            "target_delta": config.dp.target_delta,
        }
        if config.dp.noise_multiplier is not None:
            dp["noise_multiplier"] = config.dp.noise_multiplier
        if config.dp.target_epsilon is not None:
            dp["target_epsilon"] = config.dp.target_epsilon
        doc["dp"] = dp
    if config.runtime is not None:
        doc["runtime"] = {
            "host": config.runtime.host,
            "port": config.runtime.port,
            "key": config.runtime.key,
            "session_id": config.runtime.session_id,
            "use_f16": config.runtime.use_f16,
            "timeout_s": config.runtime.timeout_s,
        }
    return doc


def serialize_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def load_document(path) -> dict:
    """Read a config file into its raw mapping form."""
    try:
        with open(path) as fh:
            document = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not well formed: {exc}") from exc
    if document is None:
        raise ConfigurationError(f"config {path} is empty")
    return document


def apply_overrides(document: dict, overrides) -> dict:
    """Apply ``path.to.field=value`` overrides to a raw mapping.

    Values parse with the same scalar syntax as the config file itself.
    Only existing mappings are traversed; creating new nested sections via
    override is not allowed (it would bypass unknown-field checking until
    parse time, which still catches it, but the error is clearer here).
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(
                f"override {item!r}: expected the form path.to.field=value"
            )
        raw_path, raw_value = item.split("=", 1)
        keys = raw_path.split(".")
        if not all(keys):
            raise ConfigurationError(f"override {item!r}: malformed field path")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as exc:
            raise ConfigurationError(
                f"override {raw_path}: value {raw_value!r} is not well formed: {exc}"
            ) from exc
        node = document
        for i, key in enumerate(keys[:-1]):
            if not isinstance(node, dict) or key not in node:
                raise ConfigurationError(
                    f"override {raw_path}: no section {'.'.join(keys[: i + 1])!r}"
                )
            node = node[key]
        if not isinstance(node, dict):
            raise ConfigurationError(
                f"override {raw_path}: {'.'.join(keys[:-1])!r} is not a section"
            )
        node[keys[-1]] = value
    return document


def load_config(path, overrides=()) -> ExperimentConfig:
    return parse_config(apply_overrides(load_document(path), overrides))


# ---------------------------------------------------------------------------
# factories: config blocks to live objects
# ---------------------------------------------------------------------------


def _scene_config(block: DatasetBlock, seed: int) -> "SyntheticSceneConfig":
    from .data import SyntheticSceneConfig

    return SyntheticSceneConfig(
        image_size=block.image_size,
        num_shapes=block.num_shapes,
        shape_classes=block.shape_classes,
        color_classes=block.color_classes,
        noise_level=block.noise_level,
        size_color_correlation=block.size_color_correlation,
        seed=seed,
    )


def make_datasets(config: ExperimentConfig):
    """Materialize the train and eval splits the config describes."""
    from .data import generate_classification_pair, generate_dense_pair

    generator = {
        "classification_pair": generate_classification_pair,
        "dense_pair": generate_dense_pair,
    }[config.dataset.kind]
    train = generator(
        _scene_config(config.dataset, config.dataset.seed), config.dataset.train_count
    )
    evaluation = generator(
        _scene_config(config.dataset, config.dataset.eval_seed), config.dataset.eval_count
    )
    return train, evaluation


def build_system(config: ExperimentConfig):
    """Fresh untrained producer-side system: encoder plus one branch per task.

    Module parameters draw from torch's global generator; seed it before
    calling when initialization must be reproducible.
    """
    from .models import build_metamorph, build_split_backbone, build_task_head
    from .training import MultiTaskSystem, TaskBranch

    spec = config.backbone_spec()
    encoder, _ = build_split_backbone(spec)
    channels, h, w = spec.split_shape
    system = MultiTaskSystem(encoder=encoder, metamorph_config=config.metamorph)
    for task in config.tasks:
        metamorph = build_metamorph(config.metamorph, channels)
        head = build_task_head(
            task.kind,
            channels,
            task.num_outputs,
            feature_spatial=(h, w),
            output_spatial=config.dataset.image_size,
        )
        system.branches[task.task_id] = TaskBranch(task, metamorph, head)
    return system


def sanitizer_steps(config: ExperimentConfig) -> int:
    """Total sanitized gradient releases the configured run will make."""
    batches = config.dataset.train_count // config.training.batch_size
    return config.regime.phase1_epochs * batches


def resolve_dp(config: ExperimentConfig) -> "DPConfig":
    """Concrete sanitizer parameters for this run.

    A given noise multiplier is used as is; otherwise it is calibrated so
    the accounted epsilon over the run's sanitized steps meets the target.
    With no epsilon target the budget is unbounded and only the noise
    level limits leakage.
    """
    import math

    from .privacy import DPConfig, calibrate_sigma

    block = config.dp
    if block is None:
        raise ConfigurationError("dp: section is required to build a sanitizer")
    sample_rate = config.training.batch_size / config.dataset.train_count
    sigma = block.noise_multiplier
    if sigma is None:
        steps = sanitizer_steps(config)
        if steps < 1:
            raise ConfigurationError(
                "dp.noise_multiplier: cannot calibrate with zero sanitized steps; "
                "give the noise level explicitly"
            )
        sigma = calibrate_sigma(
            sample_rate, steps, block.target_epsilon, block.target_delta
        )
    target = block.target_epsilon if block.target_epsilon is not None else math.inf
    return DPConfig(
        clip_threshold=block.clip_threshold,
        noise_multiplier=sigma,
        sample_rate=sample_rate,
        target_epsilon=target,
        target_delta=block.target_delta,
    )
