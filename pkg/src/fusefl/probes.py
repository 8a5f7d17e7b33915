"""Representation probes: label information, input information and linear separability
of the features after each stage of a trained model."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .data import Dataset
from .errors import ConfigError, ProbeError
from .model import FusedModel, SplitModel
from .nn import Conv2d, Dense, ReLU, Unflatten, Upsample2d
from .seeding import derive_rng, derive_seed


@dataclass(frozen=True)
class ProbeConfig:
    probe_epochs: int = 10
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    decoder: str = "mirror"  # only the mirrored decoder is provided

    def __post_init__(self):
        if self.probe_epochs < 1:
            raise ConfigError("probe_epochs must be >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1 or self.batch_size < 1:
            raise ConfigError("invalid probe optimiser settings")
        if self.decoder != "mirror":
            raise ConfigError(f"unknown decoder {self.decoder!r}")


@dataclass
class ProbeResult:
    records: list[dict] = field(default_factory=list)  # stage, mi_x_proxy, mi_y, separability, recon_error
    label_entropy: float = 0.0

    def rows(self) -> list[tuple[int, str, float]]:
        """One ``(stage, metric, value)`` row per stage and reported metric."""
        out = []
        for r in self.records:
            for metric in ("mi_x_proxy", "mi_y", "separability"):
                out.append((r["stage"], metric, r[metric]))
        return out


# ----------------------------------------------------------------------------
# feature access

def num_stages(model) -> int:
    if isinstance(model, FusedModel):
        return model.num_stages
    if isinstance(model, SplitModel):
        return model.spec.num_blocks
    return int(model.num_stages)


def stage_shapes(model, k: int) -> list[tuple[int, ...]]:
    """Feature shapes at every stage boundary from the input up to stage ``k``."""
    if isinstance(model, FusedModel):
        return [model.stages[0].input_shape] + [st.output_shape for st in model.stages[:k]]
    if isinstance(model, SplitModel):
        return [model.spec.block_input_shape(j) for j in range(k + 1)]
    return list(model.stage_shapes(k))


def _features(model, x: np.ndarray, k: int, batch: int = 4096) -> np.ndarray:
    if k == 0:
        return np.asarray(x, dtype=np.float64)
    return np.concatenate([model.features(x[i : i + batch], k) for i in range(0, len(x), batch)])


def _check_stage(model, k: int, allow_zero: bool) -> None:
    lo = 0 if allow_zero else 1
    if not lo <= k <= num_stages(model):
        raise ProbeError(f"stage {k} out of range [{lo}, {num_stages(model)}]")


def _standardize(train: np.ndarray, *others: np.ndarray):
    f = train.reshape(len(train), -1)
    mu = f.mean(axis=0)
    sd = f.std(axis=0)
    sd[sd < 1e-8] = 1.0
    return [(a.reshape(len(a), -1) - mu) / sd for a in (train, *others)]


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    p = np.bincount(labels, minlength=num_classes) / len(labels)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ----------------------------------------------------------------------------
# probes

def _train_linear(feats: np.ndarray, labels: np.ndarray, num_classes: int, cfg: ProbeConfig, *keys,
                  track_ce: bool = False):
    layers = [Dense(feats.shape[1], num_classes)]
    params = nn.init_params(layers, derive_seed(cfg.seed, "probe", *keys))
    rng = derive_rng(cfg.seed, "probe-shuffle", *keys)
    opt = nn.OptState(cfg.learning_rate, cfg.momentum)
    best = np.inf
    for _ in range(cfg.probe_epochs):
        params, _ = nn.fit(layers, params, feats, labels, 1, opt, cfg.batch_size, rng)
        if track_ce:
            best = min(best, nn.cross_entropy(nn.predict(layers, params, feats), labels)[0])
    return layers, params, best


def linear_separability(model, k: int, train: Dataset, test: Dataset, cfg: ProbeConfig | None = None) -> float:
    """Test accuracy of a Dense layer trained on frozen stage-``k`` features."""
    cfg = cfg or ProbeConfig()
    _check_stage(model, k, allow_zero=False)
    ftr, fte = _standardize(_features(model, train.inputs, k), _features(model, test.inputs, k))
    layers, params, _ = _train_linear(ftr, train.labels, train.num_classes, cfg, "separability", k)
    return float(np.mean(nn.predict(layers, params, fte).argmax(axis=1) == test.labels))


def estimate_mi_y(model, k: int, dataset: Dataset, cfg: ProbeConfig | None = None) -> float:
    """Label information in stage-``k`` features: H(y) minus the best auxiliary-classifier
    cross-entropy, clamped to [0, H(y)] (nats)."""
    cfg = cfg or ProbeConfig()
    _check_stage(model, k, allow_zero=True)
    if len(np.unique(dataset.labels)) < 2:
        raise ProbeError("label information needs at least two classes in the dataset")
    (feats,) = _standardize(_features(model, dataset.inputs, k))
    h = label_entropy(dataset.labels, dataset.num_classes)
    _, _, ce = _train_linear(feats, dataset.labels, dataset.num_classes, cfg, "mi_y", k, track_ce=True)
    return float(np.clip(h - ce, 0.0, h))


def mirror_decoder(shapes: Sequence[tuple[int, ...]]) -> list:
    """Decoder from ``shapes[-1]`` back to ``shapes[0]`` mirroring the encoder's boundaries.

    Flat features map back through Dense layers (then Unflatten into an image);
    spatial features go back through nearest upsampling and 3x3 convolutions.
    An encoder of depth zero gives the empty (identity) decoder.
    """
    layers: list = []
    for j in range(len(shapes) - 1, 0, -1):
        src, dst = tuple(shapes[j]), tuple(shapes[j - 1])
        if len(src) == 1:
            layers.append(Dense(src[0], int(np.prod(dst))))
            if len(dst) > 1:
                layers.append(Unflatten(dst))
        else:
            if len(dst) != 3:
                raise ProbeError(f"cannot mirror spatial features {src} back to {dst}")
            factor = dst[1] // src[1]
            if factor < 1 or src[1] * factor != dst[1] or src[2] * factor != dst[2]:
                raise ProbeError(f"spatial sizes {src} -> {dst} are not an integer upsampling")
            if factor > 1:
                layers.append(Upsample2d(factor))
            layers.append(Conv2d(src[0], dst[0], 3, 1, 1))
        if j > 1:
            layers.append(ReLU())
    return layers


def reconstruction_error(model, k: int, dataset: Dataset, cfg: ProbeConfig | None = None,
                         decoder: list | None = None) -> float:
    """Mean squared error of the trained decoder reconstructing x from stage-``k`` features."""
    cfg = cfg or ProbeConfig()
    _check_stage(model, k, allow_zero=True)
    x = dataset.inputs
    feats = _features(model, x, k)
    layers = mirror_decoder(stage_shapes(model, k)) if decoder is None else decoder
    try:
        out = nn.check_spec(layers, feats.shape[1:]) if layers else feats.shape[1:]
    except Exception as exc:
        raise ProbeError(f"decoder does not accept stage-{k} features: {exc}") from None
    if tuple(out) != x.shape[1:]:
        raise ProbeError(f"decoder maps {feats.shape[1:]} to {tuple(out)}, expected {x.shape[1:]}")
    if not layers:
        return float(np.mean((feats - x) ** 2))
    (z,) = _standardize(feats)  # unit-scale inputs keep the decoder's SGD stable
    feats = z.reshape(feats.shape)
    params = nn.init_params(layers, derive_seed(cfg.seed, "decoder", k))
    opt = nn.OptState(cfg.learning_rate, cfg.momentum)
    params, _ = nn.fit(layers, params, feats, x, cfg.probe_epochs, opt, cfg.batch_size,
                       derive_rng(cfg.seed, "decoder-shuffle", k), loss_fn=nn.mse)
    pred = np.concatenate([nn.predict(layers, params, feats[i : i + 4096]) for i in range(0, len(feats), 4096)])
    return float(np.mean((pred - x) ** 2))


def estimate_mi_x(model, k: int, dataset: Dataset, cfg: ProbeConfig | None = None,
                  decoder: list | None = None) -> float:
    """Input-information proxy: the negated reconstruction error (comparative use only)."""
    return -reconstruction_error(model, k, dataset, cfg, decoder)


def run_probes(model, train: Dataset, test: Dataset, cfg: ProbeConfig | None = None,
               stages: Sequence[int] | None = None) -> ProbeResult:
    """All three probes at each requested stage (default 1..K).

    Label and input information are estimated on ``train``; separability is
    trained on ``train`` and scored on ``test``. For an ensemble the records
    are averaged over its members.
    """
    cfg = cfg or ProbeConfig()
    members = getattr(model, "models", None)
    if members is not None:
        # an ensemble has no shared features: probe every member and average
        runs = [run_probes(m, train, test, cfg, stages) for m in members]
        records = [{key: float(np.mean([r.records[i][key] for r in runs])) for key in runs[0].records[i]}
                   for i in range(len(runs[0].records))]
        for r in records:
            r["stage"] = int(r["stage"])
        return ProbeResult(records, runs[0].label_entropy)
    stages = list(range(1, num_stages(model) + 1)) if stages is None else list(stages)
    result = ProbeResult(label_entropy=label_entropy(train.labels, train.num_classes))
    for k in stages:
        r = reconstruction_error(model, k, train, cfg)
        result.records.append({
            "stage": k,
            "mi_x_proxy": -r,
            "mi_y": estimate_mi_y(model, k, train, cfg),
            "separability": linear_separability(model, k, train, test, cfg),
            "recon_error": r,
        })
    return result
