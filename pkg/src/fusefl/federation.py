"""Federation algorithms: FedAvg (multi-round and one-shot), ensemble, and
progressive train-fuse-freeze, plus classifier calibration and cost accounting."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .checkpoint import model_bytes, payload_bytes
from .data import BackdoorConfig, Dataset, inject_backdoor
from .errors import ConfigError, FusionError, PartitionError, ShapeError
from .model import (
    Adaptor,
    Branch,
    FusedModel,
    FusedStage,
    ModelSpec,
    ScalingPolicy,
    SplitModel,
    average_params,
    build_client_spec,
    chain,
    fuse_stage,
    make_adaptor,
    scale_width,
    unchain,
)
from .nn import Dense, Flatten, ParamSet
from .seeding import derive_rng, derive_seed

ALGORITHMS = ("fedavg", "oneshot_fedavg", "ensemble", "fusefl")
ONE_SHOT = ("oneshot_fedavg", "ensemble", "distillation")


@dataclass(frozen=True)
class FedConfig:
    algorithm: str = "fusefl"
    num_clients: int = 5
    epochs: int = 40
    rounds: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    adaptor_kind: str = "linear_mix"
    scaling: ScalingPolicy = field(default_factory=ScalingPolicy)
    seed: int = 0
    template: ModelSpec | None = None
    backdoor: BackdoorConfig | None = None
    client_widths: tuple[int, ...] | None = None  # heterogeneous branch widths (fusefl only)
    calibrate: str = "auto"  # auto: calibrate when M > 1
    calib_samples: int = 100
    calib_epochs: int = 10
    calib_lr: float | None = None
    count_downlink: bool = False
    shared_init: bool = True  # the server broadcasts one initialisation to every client
    mix_init: str = "average"  # linear_mix adaptor start: average map or random

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.learning_rate < 0 or (self.calib_lr is not None and self.calib_lr < 0):
            raise ConfigError("learning rates must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.adaptor_kind not in ("average", "linear_mix"):
            raise ConfigError(f"adaptor_kind must be average or linear_mix, got {self.adaptor_kind!r}")
        if self.mix_init not in ("random", "average"):
            raise ConfigError("mix_init must be random or average")
        if self.calibrate not in ("auto", "always", "never"):
            raise ConfigError("calibrate must be auto, always or never")
        if self.calib_samples < 0 or self.calib_epochs < 0:
            raise ConfigError("calibration sample and epoch counts must be >= 0")
        if self.client_widths is not None and len(self.client_widths) != self.num_clients:
            raise ConfigError(f"client_widths has {len(self.client_widths)} entries for {self.num_clients} clients")

    @property
    def num_blocks(self) -> int:
        return self.template.num_blocks if self.template is not None else 0


@dataclass(frozen=True)
class CostModel:
    algorithm: str
    model_bytes: float  # S
    rounds: int = 1  # T
    num_clients: int = 1  # M
    stage_bytes: tuple[float, ...] | None = None  # fusefl: every per-client per-stage upload
    downlink: bool = False

    def __post_init__(self):
        if self.model_bytes <= 0:
            raise ConfigError("model_bytes must be positive")
        if self.rounds < 0 or self.num_clients < 1:
            raise ConfigError("rounds must be >= 0 and num_clients >= 1")


def comm_cost(cm: CostModel) -> float:
    """Total bytes moved between clients and server (uplink unless ``downlink``)."""
    if cm.rounds == 0:
        return 0
    if cm.algorithm in ("fedavg", "oneshot_fedavg"):
        up = cm.rounds * cm.num_clients * cm.model_bytes
        down = up  # the global model is broadcast every round
    elif cm.algorithm == "fusefl" and cm.stage_bytes is not None:
        up = sum(cm.stage_bytes)
        down = cm.num_clients * up  # every client receives every fused stage
    else:
        up = cm.num_clients * cm.model_bytes
        down = 0
    return up + down if cm.downlink else up


def storage_cost(cm: CostModel) -> float:
    if cm.algorithm == "ensemble":
        return cm.num_clients * cm.model_bytes
    return cm.model_bytes


@dataclass
class ClassStats:
    means: np.ndarray  # (C, d)
    variances: np.ndarray  # (C, d)
    counts: np.ndarray  # (C,)
    feature_shape: tuple[int, ...] = ()

    def __post_init__(self):
        if np.any(self.counts < 0) or np.any(self.variances < 0):
            raise ValueError("class counts and variances must be non-negative")


def class_stats(features: np.ndarray, labels: np.ndarray, num_classes: int) -> ClassStats:
    shape = features.shape[1:]
    f = features.reshape(len(features), -1)
    d = f.shape[1]
    means = np.zeros((num_classes, d))
    variances = np.zeros((num_classes, d))
    counts = np.bincount(labels, minlength=num_classes)
    for c in range(num_classes):
        rows = f[labels == c]
        if len(rows):
            means[c] = rows.mean(axis=0)
            variances[c] = rows.var(axis=0)
    return ClassStats(means, variances, counts, tuple(shape))


def aggregate_class_stats(stats: Sequence[ClassStats]) -> ClassStats:
    """Pool per-class Gaussians across clients, weighting by class counts."""
    counts = np.sum([s.counts for s in stats], axis=0)
    safe = np.maximum(counts, 1)[:, None]
    means = np.sum([s.counts[:, None] * s.means for s in stats], axis=0) / safe
    second = np.sum([s.counts[:, None] * (s.variances + s.means**2) for s in stats], axis=0) / safe
    variances = np.maximum(second - means**2, 0.0)
    if len(stats) == 1:
        means, variances = stats[0].means.copy(), stats[0].variances.copy()
    return ClassStats(means, variances, counts, stats[0].feature_shape)


@dataclass
class RunMetrics:
    algorithm: str
    records: list[dict] = field(default_factory=list)
    test_accuracy: float = float("nan")
    comm_bytes: float = 0
    storage_bytes: float = 0
    param_counts: dict = field(default_factory=dict)
    freeze_audit: list[tuple[int, bool]] = field(default_factory=list)
    client_accuracy: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


@dataclass
class Ensemble:
    models: list[SplitModel]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.mean([m.logits(x) for m in self.models], axis=0)

    def count_params(self) -> int:
        return sum(m.spec.count_params() for m in self.models)


# ----------------------------------------------------------------------------
# evaluation

def predict_logits(model, x: np.ndarray, batch: int = 2048) -> np.ndarray:
    if isinstance(model, tuple):
        layers, params = model
        fn = lambda z: nn.predict(layers, params, z)  # noqa: E731
    elif hasattr(model, "logits"):
        fn = model.logits
    elif callable(model):
        fn = model
    else:
        raise TypeError(f"cannot evaluate {type(model).__name__}")
    return np.concatenate([fn(x[i : i + batch]) for i in range(0, len(x), batch)])


def evaluate(model, test: Dataset) -> float:
    """Fraction of ``test`` whose argmax logit (lowest index on ties) matches the label."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    logits = predict_logits(model, test.inputs)
    if logits.shape != (len(test), test.num_classes):
        raise ShapeError(f"model produced logits of shape {logits.shape}, expected {(len(test), test.num_classes)}")
    return float(np.mean(logits.argmax(axis=1) == test.labels))


# ----------------------------------------------------------------------------
# local training

def train_local(data: Dataset, layers: Sequence, params: ParamSet, epochs: int, cfg: FedConfig, *,
                client=0, stage=0, phase: str = "local") -> tuple[ParamSet, list[dict]]:
    """Mini-batch SGD on one client's data; shuffling uses the (seed, client, stage) stream."""
    if len(data) == 0:
        raise PartitionError(f"client {client} has an empty dataset")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    rng = derive_rng(cfg.seed, "shuffle", client, stage)
    opt = nn.OptState(cfg.learning_rate, cfg.momentum)
    params, history = nn.fit(layers, params, data.inputs, data.labels, epochs, opt, cfg.batch_size, rng)
    records = [
        {"phase": phase, "stage_or_round": stage, "client": client, "epoch": e, "train_loss": loss, "train_acc": acc}
        for e, (loss, acc) in enumerate(history)
    ]
    return params, records


def split_epochs(total: int, parts: int) -> list[int]:
    """Floor per part; the remainder goes to the last part."""
    base = total // parts
    return [base] * (parts - 1) + [total - base * (parts - 1)]


def _client_weights(clients: Sequence[Dataset]) -> list[float]:
    n = np.array([len(c) for c in clients], dtype=np.float64)
    if np.any(n == 0):
        raise PartitionError(f"client {int(np.argmin(n))} has an empty dataset")
    return list(n / n.sum())


def _check_clients(cfg: FedConfig, clients: Sequence[Dataset]) -> list[Dataset]:
    """Validate the run inputs and apply the configured backdoor to its target clients."""
    if cfg.template is None:
        raise ConfigError("FedConfig.template is required to run an algorithm")
    if len(clients) != cfg.num_clients:
        raise ConfigError(f"config says {cfg.num_clients} clients, got {len(clients)} datasets")
    return poison_clients(clients, cfg.backdoor, cfg.seed)


def poison_clients(clients: Sequence[Dataset], bd: BackdoorConfig | None, seed: int) -> list[Dataset]:
    clients = list(clients)
    if bd is None:
        return clients
    bd.validate(len(clients))
    for m in bd.target_clients:
        clients[m] = inject_backdoor(clients[m], bd, derive_seed(seed, "backdoor", m))
    return clients


def _init_seed(cfg: FedConfig, client: int) -> int:
    return derive_seed(cfg.seed, "init", "global" if cfg.shared_init else client)


def _finish(metrics: RunMetrics, model, test: Dataset | None) -> None:
    if test is not None:
        metrics.test_accuracy = evaluate(model, test)


# ----------------------------------------------------------------------------
# FedAvg

def run_fedavg(cfg: FedConfig, clients: Sequence[Dataset], test: Dataset | None = None):
    """Multi-round FedAvg with full participation; ``oneshot_fedavg`` forces T = 1.

    Returns ``(metrics, global_model)``.
    """
    clients = _check_clients(cfg, clients)
    if cfg.client_widths is not None:
        raise ConfigError("FedAvg needs one shared model spec; heterogeneous client widths cannot be averaged")
    algorithm = "oneshot_fedavg" if cfg.algorithm == "oneshot_fedavg" else "fedavg"
    rounds = 1 if algorithm == "oneshot_fedavg" else cfg.rounds
    spec = cfg.template
    weights = _client_weights(clients)
    global_model = SplitModel.init(spec, derive_seed(cfg.seed, "init", "global"))
    lengths = [len(b) for b in spec.blocks] + [len(spec.classifier)]
    metrics = RunMetrics(algorithm)
    for t, epochs in enumerate(split_epochs(cfg.epochs, rounds)):
        layers, start = chain(global_model.parts())
        if epochs == 0:
            metrics.notes.append(f"round {t} has zero local epochs")
            continue
        local = []
        for m, data in enumerate(clients):
            params, recs = train_local(data, layers, nn.copy_params(start), epochs, cfg, client=m, stage=t,
                                       phase="round")
            local.append(params)
            metrics.records.extend(recs)
        merged = unchain(average_params(local, weights), lengths)
        global_model = SplitModel(spec, merged[:-1], merged[-1])
    s = model_bytes(global_model)
    cm = CostModel("fedavg", s, rounds, len(clients), downlink=cfg.count_downlink)
    metrics.comm_bytes = comm_cost(cm)
    metrics.storage_bytes = storage_cost(cm)
    metrics.param_counts = {"model": spec.count_params()}
    _finish(metrics, global_model, test)
    return metrics, global_model


# ----------------------------------------------------------------------------
# ensemble

def run_ensemble(cfg: FedConfig, clients: Sequence[Dataset], test: Dataset | None = None):
    """Isolated local training; predictions average the M models' logits."""
    clients = _check_clients(cfg, clients)
    spec = cfg.template
    metrics = RunMetrics("ensemble")
    models = []
    lengths = [len(b) for b in spec.blocks] + [len(spec.classifier)]
    for m, data in enumerate(clients):
        init = SplitModel.init(spec, _init_seed(cfg, m))
        layers, params = chain(init.parts())
        params, recs = train_local(data, layers, params, cfg.epochs, cfg, client=m, stage=0)
        parts = unchain(params, lengths)
        models.append(SplitModel(spec, parts[:-1], parts[-1]))
        metrics.records.extend(recs)
    ens = Ensemble(models)
    for m, (model, data) in enumerate(zip(models, clients)):
        row = {"client": m, "local_acc": evaluate(model, data)}
        if test is not None:
            row["global_acc"] = evaluate(model, test)
        metrics.client_accuracy.append(row)
    s = model_bytes(models[0])
    cm = CostModel("ensemble", s, 1, len(clients), downlink=cfg.count_downlink)
    metrics.comm_bytes = comm_cost(cm)
    metrics.storage_bytes = storage_cost(cm)
    metrics.param_counts = {"per_client": spec.count_params(), "total": ens.count_params()}
    _finish(metrics, ens, test)
    return metrics, ens


# ----------------------------------------------------------------------------
# calibration

def calibrate_classifier(fused: FusedModel, client_stats: Sequence[ClassStats], cfg: FedConfig,
                         init: ParamSet | None = None) -> tuple[ParamSet, list[dict]]:
    """Retrain ``fused.classifier`` on virtual features drawn from pooled class Gaussians.

    Starts from ``init`` when given (the averaged client classifiers), else from
    a fresh initialisation. Returns the params and per-epoch records.
    """
    agg = aggregate_class_stats(client_stats)
    num_classes = len(agg.counts)
    start = nn.copy_params(init) if init is not None else nn.init_params(
        fused.classifier, derive_seed(cfg.seed, "classifier"))
    if cfg.calib_samples == 0 or cfg.calib_epochs == 0:
        return start, []
    rng = derive_rng(cfg.seed, "virtual")
    xs, ys = [], []
    for c in range(num_classes):
        if agg.counts[c] == 0:
            warnings.warn(f"class {c} has no samples on any client; skipped during calibration", stacklevel=2)
            continue
        noise = rng.standard_normal((cfg.calib_samples, agg.means.shape[1]))
        xs.append(agg.means[c] + np.sqrt(agg.variances[c]) * noise)
        ys.append(np.full(cfg.calib_samples, c))
    virtual = np.concatenate(xs).reshape((-1,) + tuple(agg.feature_shape))
    data = Dataset(virtual, np.concatenate(ys), num_classes)
    calib_cfg = replace(cfg, learning_rate=cfg.calib_lr if cfg.calib_lr is not None else cfg.learning_rate)
    return train_local(data, fused.classifier, start, cfg.calib_epochs, calib_cfg, client="server",
                       stage="calibrate", phase="calibrate")


# ----------------------------------------------------------------------------
# progressive train / fuse / freeze

def _stage_digest(stages: Sequence[FusedStage]) -> str:
    h = hashlib.sha256()
    for st in stages:
        for br in st.branches:
            sets = [br.params] + ([br.adaptor.params] if br.adaptor is not None else [])
            for ps in sets:
                for i in sorted(ps):
                    h.update(ps[i].weights.tobytes())
                    h.update(ps[i].bias.tobytes())
                    h.update(b"T" if ps[i].trainable else b"F")
    return h.hexdigest()


def client_specs(cfg: FedConfig) -> list[ModelSpec]:
    t = cfg.template
    if cfg.client_widths is not None:
        return [build_client_spec(t, w) for w in cfg.client_widths]
    width = scale_width(t.base_width, cfg.num_clients, cfg.scaling)
    return [build_client_spec(t, width)] * cfg.num_clients


def _shape_fits(layers, shape) -> bool:
    try:
        nn.output_shape(layers, shape)
    except (ShapeError, ConfigError):
        return False
    return True


def _own_dims(stage: FusedStage) -> list[int]:
    """Each client's own branch width, indexed by client."""
    return [s[0] for s in stage.branch_out_shapes]


def stack_classifiers(params: Sequence[ParamSet], order: Sequence[int], weights: Sequence[float]) -> ParamSet:
    """One Dense over the concatenated branches that equals the weighted mean of the
    client classifiers, each applied to its own branch slice."""
    w = np.concatenate([weights[m] * params[m][0].weights for m in order], axis=0)
    b = np.sum([weights[m] * params[m][0].bias for m in order], axis=0)
    return {0: nn.Param(w, b)}


def run_fusefl(cfg: FedConfig, clients: Sequence[Dataset], test: Dataset | None = None,
               client_order: Sequence[int] | None = None):
    """Train each stage locally, fuse the stage's blocks across clients, freeze, repeat.

    Returns ``(metrics, fused_model)``.
    """
    clients = _check_clients(cfg, clients)
    m_count = len(clients)
    specs = client_specs(cfg)
    k_count = specs[0].num_blocks
    num_classes = specs[0].num_classes
    order = tuple(range(m_count)) if client_order is None else tuple(client_order)
    weights = _client_weights(clients)
    models = [SplitModel.init(s, _init_seed(cfg, m)) for m, s in enumerate(specs)]
    metrics = RunMetrics("fusefl")
    stage_epochs = split_epochs(cfg.epochs, k_count)
    if cfg.epochs % k_count:
        metrics.notes.append(f"E={cfg.epochs} not divisible by K={k_count}; stage epochs {stage_epochs}")

    stages: list[FusedStage] = []
    adaptors: list[Adaptor | None] = [None] * m_count
    prefix = [c.inputs for c in clients]  # features after the fused prefix, per client
    shape = tuple(specs[0].input_shape)
    uploads: list[int] = []
    for k in range(k_count):
        before = _stage_digest(stages)
        for m, data in enumerate(clients):
            spec, model, a = specs[m], models[m], adaptors[m]
            learned = a is not None and a.kind == "linear_mix"
            inputs = a(prefix[m]) if a is not None and not learned else prefix[m]
            parts = [(a.layers, a.params)] if learned else []
            parts += list(zip(spec.blocks[k:], model.block_params[k:])) + [(spec.classifier, model.classifier_params)]
            layers, params = chain(parts)
            if stage_epochs[k] > 0:
                params, recs = train_local(Dataset(inputs, data.labels, data.num_classes), layers, params,
                                           stage_epochs[k], cfg, client=m, stage=k, phase="stage")
                metrics.records.extend(recs)
            segs = unchain(params, [len(p[0]) for p in parts])
            if learned:
                adaptors[m] = replace(a, params=segs.pop(0))
            model.block_params[k:] = segs[:-1]
            model.classifier_params = segs[-1]
        metrics.freeze_audit.append((k, _stage_digest(stages) == before))

        branches = [Branch(specs[m].blocks[k], models[m].block_params[k], adaptors[m]) for m in range(m_count)]
        stage = fuse_stage(branches, order, shape)
        for m in range(m_count):
            sets = [models[m].block_params[k]] + ([adaptors[m].params] if adaptors[m] is not None else [])
            uploads.append(payload_bytes(sets))
        stages.append(stage)
        shape = stage.output_shape
        prefix = [stage(p) for p in prefix]
        if k + 1 < k_count:
            adaptors = [
                make_adaptor(cfg.adaptor_kind, stage.branch_dims(), specs[m].block_input_shape(k + 1)[0],
                             derive_seed(cfg.seed, "adaptor", m, k + 1), spatial=len(shape) > 1,
                             init=cfg.mix_init)
                for m in range(m_count)
            ]

    # final head and classifier
    last = stages[-1]
    dims = last.branch_dims()
    head = None
    if cfg.adaptor_kind == "average" and len(set(dims)) == 1:
        head = make_adaptor("average", dims, dims[0], 0, spatial=len(shape) > 1)
    head_shape = (head.out_dim,) + shape[1:] if head is not None else shape
    cls_layers = specs[0].classifier
    init = None
    if all(s.classifier == cls_layers for s in specs) and _shape_fits(cls_layers, head_shape):
        init = average_params([md.classifier_params for md in models], weights)
    else:
        cls_layers = [Dense(int(np.prod(head_shape)), num_classes)]
        if len(head_shape) > 1:
            cls_layers.insert(0, Flatten())
        elif head is None and all(s.classifier == [Dense(d, num_classes)] for s, d in zip(specs, _own_dims(last))):
            init = stack_classifiers([md.classifier_params for md in models], order, weights)
    if init is not None:  # clients upload their classifiers alongside the last block
        uploads = uploads[:-m_count] + [u + payload_bytes([md.classifier_params])
                                        for u, md in zip(uploads[-m_count:], models)]
    fused = FusedModel(stages, list(cls_layers), init if init is not None else nn.init_params(
        cls_layers, derive_seed(cfg.seed, "classifier")), head)

    do_calibrate = cfg.calibrate == "always" or (cfg.calibrate == "auto" and m_count > 1)
    if not do_calibrate and init is None:
        raise ConfigError("client classifiers cannot be averaged onto the fused features; calibration is required")
    if do_calibrate:
        feats = [fused.head(p) if fused.head is not None else p for p in prefix]
        stats = [class_stats(f, c.labels, num_classes) for f, c in zip(feats, clients)]
        fused.classifier_params, recs = calibrate_classifier(fused, stats, cfg, init)
        metrics.records.extend(recs)
        metrics.metadata["stats_bytes"] = sum(4 * (s.means.size + s.variances.size + s.counts.size) for s in stats)
    metrics.freeze_audit.append((k_count, all(not p.trainable for st in stages for br in st.branches
                                              for p in br.params.values())))

    s_client = model_bytes(models[0])
    cm = CostModel("fusefl", model_bytes(fused), 1, m_count, tuple(uploads), downlink=cfg.count_downlink)
    metrics.comm_bytes = comm_cost(cm)
    metrics.storage_bytes = storage_cost(cm)
    metrics.param_counts = {"per_client": specs[0].count_params(), "fused": fused.count_params(),
                            "template": cfg.template.count_params()}
    metrics.metadata.update({
        "stage_epochs": stage_epochs, "client_order": list(order), "client_bytes": s_client,
        "calibrated": do_calibrate, "calib_samples": cfg.calib_samples, "calib_epochs": cfg.calib_epochs,
        "calib_covariance": "diagonal", "upload_bytes": uploads,
    })
    _finish(metrics, fused, test)
    return metrics, fused


def run(cfg: FedConfig, clients: Sequence[Dataset], test: Dataset | None = None):
    """Dispatch on ``cfg.algorithm``."""
    if cfg.algorithm in ("fedavg", "oneshot_fedavg"):
        return run_fedavg(cfg, clients, test)
    if cfg.algorithm == "ensemble":
        return run_ensemble(cfg, clients, test)
    return run_fusefl(cfg, clients, test)


def run_lr_grid(cfg: FedConfig, clients: Sequence[Dataset], test: Dataset,
                learning_rates: Sequence[float] = (1e-4, 1e-3, 1e-2, 1e-1)):
    """Run once per learning rate and keep the best test accuracy.

    A run that diverges (non-finite parameters reach fusion or evaluation) is
    recorded with accuracy ``nan`` and skipped. Returns
    ``(best_lr, metrics, model, {lr: accuracy})``.
    """
    table: dict[float, float] = {}
    best = None
    for lr in learning_rates:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                metrics, model = run(replace(cfg, learning_rate=lr), clients, test)
        except FusionError:
            table[lr] = float("nan")
            continue
        table[lr] = metrics.test_accuracy
        if best is None or metrics.test_accuracy > best[1].test_accuracy:
            best = (lr, metrics, model)
    if best is None:
        raise FusionError(f"every learning rate in {tuple(learning_rates)} diverged")
    return best[0], best[1], best[2], table
