"""Block decomposition, width scaling, stage fusion and adaptors."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, FusionError, ShapeError
from .seeding import derive_seed
from .nn import AvgPool2d, Conv2d, Dense, Flatten, LayerSpec, ParamSet, ReLU


@dataclass
class ModelSpec:
    """A network written as ``classifier . block_K . ... . block_1``."""

    blocks: list[list[LayerSpec]]
    classifier: list[LayerSpec]
    base_width: int
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        self.blocks = [list(b) for b in self.blocks]
        self.classifier = list(self.classifier)
        self.input_shape = tuple(self.input_shape)
        if len(self.blocks) < 1:
            raise ConfigError("a model needs at least one block")
        out = nn.check_spec(self.layers(), self.input_shape)
        if out != (self.num_classes,):
            raise ConfigError(f"classifier outputs {out}, expected ({self.num_classes},)")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def layers(self) -> list[LayerSpec]:
        return [layer for b in self.blocks for layer in b] + self.classifier

    def block_input_shape(self, k: int) -> tuple[int, ...]:
        """Input shape of block ``k`` (0-based); ``k == K`` gives the classifier input."""
        shape = self.input_shape
        for b in self.blocks[:k]:
            shape = nn.output_shape(b, shape)
        return shape

    def count_params(self) -> int:
        return nn.count_params(self.layers())


def _group(groups: list[list[LayerSpec]], num_blocks: int) -> list[list[LayerSpec]]:
    if not 1 <= num_blocks <= len(groups):
        raise ConfigError(f"cannot split {len(groups)} layer groups into {num_blocks} blocks")
    bounds = np.linspace(0, len(groups), num_blocks + 1).round().astype(int)
    return [[layer for g in groups[a:b] for layer in g] for a, b in zip(bounds[:-1], bounds[1:])]


def mlp_template(input_shape, num_classes: int, base_width: int = 64, depth: int = 4,
                 num_blocks: int = 2) -> ModelSpec:
    """``depth`` hidden Dense+ReLU layers of width ``base_width`` grouped into blocks.

    Image-shaped inputs get a leading Flatten.
    """
    input_shape = tuple(input_shape)
    in_dim = int(np.prod(input_shape))
    groups: list[list[LayerSpec]] = []
    for i in range(depth):
        g: list[LayerSpec] = [Flatten()] if i == 0 and len(input_shape) > 1 else []
        g += [Dense(in_dim if i == 0 else base_width, base_width), ReLU()]
        groups.append(g)
    return ModelSpec(_group(groups, num_blocks), [Dense(base_width, num_classes)], base_width,
                     input_shape, num_classes)


def conv_template(input_shape=(1, 28, 28), num_classes: int = 10, base_width: int = 64,
                  num_blocks: int = 4) -> ModelSpec:
    """Four conv stages (widths n, n, 2n, 2n) ending in global average pooling."""
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ConfigError("conv template needs spatial dims divisible by 4")
    n = base_width
    groups = [
        [Conv2d(c, n, 3, 1, 1), ReLU(), AvgPool2d(2)],
        [Conv2d(n, n, 3, 1, 1), ReLU(), AvgPool2d(2)],
        [Conv2d(n, 2 * n, 3, 1, 1), ReLU()],
        [Conv2d(2 * n, 2 * n, 3, 1, 1), ReLU(), AvgPool2d(h // 4), Flatten()],
    ]
    return ModelSpec(_group(groups, num_blocks), [Dense(2 * n, num_classes)], n, tuple(input_shape), num_classes)


# ----------------------------------------------------------------------------
# width scaling

@dataclass(frozen=True)
class ScalingPolicy:
    mode: Literal["sqrt_m", "explicit"] = "sqrt_m"
    explicit_width: int | None = None

    def __post_init__(self):
        if self.mode not in ("sqrt_m", "explicit"):
            raise ConfigError(f"unknown scaling mode {self.mode!r}")
        if self.mode == "explicit" and (self.explicit_width is None or self.explicit_width < 1):
            raise ConfigError("explicit scaling needs explicit_width >= 1")


def scale_width(base_width: int, num_clients: int, policy: ScalingPolicy | None = None) -> int:
    """Client width so that M fused clients cost about one base model: round(n_s / sqrt(M))."""
    policy = policy or ScalingPolicy()
    if policy.mode == "explicit":
        return int(policy.explicit_width)
    if base_width < 1 or num_clients < 1:
        raise ConfigError("base width and number of clients must be >= 1")
    return max(1, round(base_width / math.sqrt(num_clients)))


def build_client_spec(template: ModelSpec, width: int) -> ModelSpec:
    """Rescale every hidden width of ``template`` from its base width to ``width``.

    The first parametric layer's input and the classifier output keep their size.
    """
    if width < 1:
        raise ConfigError(f"client width must be >= 1, got {width}")
    ns = template.base_width
    if width == ns:
        return copy.deepcopy(template)

    def scale(d: int) -> int:
        if d % ns:
            raise ConfigError(f"hidden width {d} is not a multiple of base width {ns}")
        return d // ns * width

    layers = template.layers()
    param_idx = [i for i, l in enumerate(layers) if isinstance(l, nn.PARAMETRIC)]
    first, last = param_idx[0], param_idx[-1]
    new = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            layer = Dense(layer.in_dim if i == first else scale(layer.in_dim),
                          layer.out_dim if i == last else scale(layer.out_dim))
        elif isinstance(layer, Conv2d):
            layer = replace(layer,
                            in_channels=layer.in_channels if i == first else scale(layer.in_channels),
                            out_channels=layer.out_channels if i == last else scale(layer.out_channels))
        new.append(layer)
    blocks, pos = [], 0
    for b in template.blocks:
        blocks.append(new[pos : pos + len(b)])
        pos += len(b)
    return ModelSpec(blocks, new[pos:], width, template.input_shape, template.num_classes)


# ----------------------------------------------------------------------------
# a plain block-structured model

@dataclass
class SplitModel:
    spec: ModelSpec
    block_params: list[ParamSet]
    classifier_params: ParamSet

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "SplitModel":
        flat = nn.init_params(spec.layers(), seed)
        parts = unchain(flat, [len(b) for b in spec.blocks] + [len(spec.classifier)])
        return cls(spec, parts[:-1], parts[-1])

    def parts(self) -> list[tuple[list[LayerSpec], ParamSet]]:
        return list(zip(self.spec.blocks, self.block_params)) + [(self.spec.classifier, self.classifier_params)]

    def features(self, x: np.ndarray, k: int) -> np.ndarray:
        """Output of block ``k`` (1-based); ``k == 0`` returns ``x``."""
        h = np.asarray(x, dtype=np.float64)
        for layers, params in zip(self.spec.blocks[:k], self.block_params[:k]):
            h = nn.predict(layers, params, h)
        return h

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = self.features(x, self.spec.num_blocks)
        return nn.predict(self.spec.classifier, self.classifier_params, h)

    def all_params(self) -> list[ParamSet]:
        return self.block_params + [self.classifier_params]


def chain(parts: Sequence[tuple[Sequence[LayerSpec], ParamSet]]) -> tuple[list[LayerSpec], ParamSet]:
    """Concatenate (layers, params) segments into one network, re-indexing parameters."""
    layers: list[LayerSpec] = []
    params: ParamSet = {}
    for seg_layers, seg_params in parts:
        off = len(layers)
        layers.extend(seg_layers)
        for i, p in seg_params.items():
            params[off + i] = p
    return layers, params


def unchain(params: ParamSet, lengths: Sequence[int]) -> list[ParamSet]:
    out, off = [], 0
    for n in lengths:
        out.append({i - off: p for i, p in params.items() if off <= i < off + n})
        off += n
    return out


# ----------------------------------------------------------------------------
# adaptors

@dataclass
class Adaptor:
    """Maps the concatenation of M branch outputs to the next block's input.

    ``average`` is the parameter-free mean over branch slices; ``linear_mix``
    is a learned Dense (flat features) or 1x1 Conv2d (spatial features).
    """

    kind: Literal["average", "linear_mix"]
    branch_dims: tuple[int, ...]
    out_dim: int
    spatial: bool = False
    layers: list[LayerSpec] = field(default_factory=list)
    params: ParamSet = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return sum(self.branch_dims)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if z.shape[1] != self.in_dim:
            raise ShapeError(f"adaptor expects {self.in_dim} input features, got {z.shape[1]}")
        if self.kind == "average":
            m = len(self.branch_dims)
            return z.reshape((z.shape[0], m, self.out_dim) + z.shape[2:]).mean(axis=1)
        return nn.predict(self.layers, self.params, z)

    def count_params(self) -> int:
        return nn.count_params(self.layers)


def make_adaptor(kind: str, branch_dims: Sequence[int], out_dim: int, seed: int, spatial: bool = False,
                 init: str = "random") -> Adaptor:
    branch_dims = tuple(int(d) for d in branch_dims)
    if not branch_dims or min(branch_dims) < 1 or out_dim < 1:
        raise ConfigError("adaptor dims must be positive")
    if kind == "average":
        if len(set(branch_dims)) != 1 or branch_dims[0] != out_dim:
            raise ConfigError(
                f"average adaptor needs equal branch dims matching the output ({branch_dims} -> {out_dim}); "
                "use linear_mix for mismatched shapes"
            )
        return Adaptor("average", branch_dims, out_dim, spatial)
    if kind == "linear_mix":
        total = sum(branch_dims)
        layers: list[LayerSpec] = [Conv2d(total, out_dim, kernel=1) if spatial else Dense(total, out_dim)]
        params = nn.init_params(layers, seed)
        if init == "average":
            params = {0: _average_map(branch_dims, out_dim, spatial)}
        elif init != "random":
            raise ConfigError(f"unknown linear_mix init {init!r}")
        return Adaptor("linear_mix", branch_dims, out_dim, spatial, layers, params)
    raise ConfigError(f"unknown adaptor kind {kind!r}")


def _average_map(branch_dims: Sequence[int], out_dim: int, spatial: bool) -> nn.Param:
    """Mixing weights that average the branches (each truncated or zero-padded to ``out_dim``)."""
    w = np.zeros((sum(branch_dims), out_dim))
    off = 0
    for d in branch_dims:
        n = min(d, out_dim)
        w[off + np.arange(n), np.arange(n)] = 1.0 / len(branch_dims)
        off += d
    if spatial:
        w = w.T.reshape(out_dim, -1, 1, 1).copy()
    return nn.Param(w, np.zeros(out_dim))


# ----------------------------------------------------------------------------
# fused stages

@dataclass
class Branch:
    """One client's frozen contribution to a stage: optional input adaptor then its block."""

    layers: list[LayerSpec]
    params: ParamSet
    adaptor: Adaptor | None = None

    def __call__(self, z: np.ndarray) -> np.ndarray:
        h = self.adaptor(z) if self.adaptor is not None else z
        return nn.predict(self.layers, self.params, h)

    def count_params(self) -> int:
        return nn.count_params(self.layers) + (self.adaptor.count_params() if self.adaptor else 0)

    def input_shape_for(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.adaptor is None:
            return shape
        if shape[0] != self.adaptor.in_dim:
            raise ShapeError(f"adaptor expects {self.adaptor.in_dim} features, stage input has {shape[0]}")
        return (self.adaptor.out_dim,) + tuple(shape[1:])


@dataclass
class FusedStage:
    branches: list[Branch]
    client_order: tuple[int, ...]
    input_shape: tuple[int, ...]
    branch_out_shapes: list[tuple[int, ...]]

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    @property
    def output_shape(self) -> tuple[int, ...]:
        first = self.branch_out_shapes[self.client_order[0]]
        return (sum(self.branch_out_shapes[m][0] for m in self.client_order),) + tuple(first[1:])

    def branch_dims(self) -> tuple[int, ...]:
        """Feature/channel dims in concatenation order."""
        return tuple(self.branch_out_shapes[m][0] for m in self.client_order)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        cache: dict[int, np.ndarray] = {}
        outs = []
        for m in self.client_order:
            br = self.branches[m]
            # parameter-free average adaptors are identical across branches
            if br.adaptor is not None and br.adaptor.kind == "average":
                key = br.adaptor.in_dim
                if key not in cache:
                    cache[key] = br.adaptor(z)
                outs.append(nn.predict(br.layers, br.params, cache[key]))
            else:
                outs.append(br(z))
        return np.concatenate(outs, axis=1)

    def count_params(self) -> int:
        return sum(b.count_params() for b in self.branches)


def _freeze_adaptor(a: Adaptor | None) -> Adaptor | None:
    if a is None:
        return None
    return replace(a, layers=list(a.layers), params=nn.frozen(a.params))


def fuse_stage(blocks: Sequence, order: Sequence[int], input_shape: Sequence[int]) -> FusedStage:
    """Deep-copy and freeze M client blocks into one side-by-side stage.

    ``blocks`` holds one entry per client: a Branch or a ``(layers, params)``
    pair. Outputs are concatenated along axis 1 following ``order``.
    """
    branches = []
    for b in blocks:
        if isinstance(b, Branch):
            branches.append(Branch(list(b.layers), nn.frozen(b.params), _freeze_adaptor(b.adaptor)))
        else:
            layers, params = b
            branches.append(Branch(list(layers), nn.frozen(params)))
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(len(branches))):
        raise FusionError(f"client order {order} is not a permutation of 0..{len(branches) - 1}")
    for br in branches:
        for p in br.params.values():
            if not (np.all(np.isfinite(p.weights)) and np.all(np.isfinite(p.bias))):
                raise FusionError("branch parameters must be finite")
    input_shape = tuple(input_shape)
    out_shapes = []
    for m, br in enumerate(branches):
        try:
            out_shapes.append(nn.output_shape(br.layers, br.input_shape_for(input_shape)))
        except ShapeError as exc:
            raise FusionError(f"branch {m} cannot take stage input {input_shape}: {exc}") from None
    if len({s[1:] for s in out_shapes}) != 1:
        raise FusionError(f"branch outputs differ beyond the feature axis: {out_shapes}")
    return FusedStage(branches, order, input_shape, out_shapes)


@dataclass
class FusedModel:
    stages: list[FusedStage]
    classifier: list[LayerSpec]
    classifier_params: ParamSet
    head: Adaptor | None = None  # None means the classifier reads the raw concatenation

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.stages[0].input_shape

    def features(self, x: np.ndarray, k: int) -> np.ndarray:
        return fused_features(self.stages[:k], x)

    def head_features(self, x: np.ndarray) -> np.ndarray:
        z = fused_features(self.stages, x)
        return self.head(z) if self.head is not None else z

    def logits(self, x: np.ndarray) -> np.ndarray:
        return nn.predict(self.classifier, self.classifier_params, self.head_features(x))

    def count_params(self) -> int:
        return (sum(s.count_params() for s in self.stages) + nn.count_params(self.classifier)
                + (self.head.count_params() if self.head else 0))

    def all_params(self) -> list[ParamSet]:
        """Every parameter set: branches and their adaptors stage by stage, then head and classifier."""
        out = []
        for st in self.stages:
            for br in st.branches:
                out.append(br.params)
                if br.adaptor is not None:
                    out.append(br.adaptor.params)
        if self.head is not None:
            out.append(self.head.params)
        return out + [self.classifier_params]


def fused_features(stages: Sequence[FusedStage], x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for k, stage in enumerate(stages):
        if h.shape[1:] != stage.input_shape:
            raise ShapeError(f"stage {k + 1} expects input {stage.input_shape}, got {h.shape[1:]}")
        h = stage(h)
    return h


def fused_forward(model, x: np.ndarray) -> np.ndarray:
    """Logits of a FusedModel, or features of a bare sequence of fused stages."""
    if isinstance(model, FusedModel):
        return model.logits(x)
    return fused_features(model, x)


def average_params(param_sets: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """Weighted average ``ref + sum_m w_m (theta_m - ref)`` with ``ref`` the first set.

    Written relative to a reference so identical inputs come back bit-identical.
    """
    ref = param_sets[0]
    out: ParamSet = {}
    for i, p in ref.items():
        w = p.weights.copy()
        b = p.bias.copy()
        for ps, wt in zip(param_sets, weights):
            if ps[i].weights.shape != p.weights.shape:
                raise ShapeError(f"cannot average layer {i}: shapes {ps[i].weights.shape} vs {p.weights.shape}")
            w += wt * (ps[i].weights - p.weights)
            b += wt * (ps[i].bias - p.bias)
        out[i] = nn.Param(w, b, p.trainable)
    return out


def fuse_models(models: Sequence[SplitModel], adaptor_kind: str = "average", order: Sequence[int] | None = None,
                weights: Sequence[float] | None = None, seed: int = 0) -> FusedModel:
    """Assemble already-trained client models into a FusedModel without further training.

    Average adaptors reuse the weighted mean of the client classifiers; with
    linear_mix the adaptors and a Dense classifier over the concatenation are
    freshly initialised.
    """
    m_count = len(models)
    order = tuple(range(m_count)) if order is None else tuple(order)
    weights = [1.0 / m_count] * m_count if weights is None else list(weights)
    k_count = models[0].spec.num_blocks
    if any(md.spec.num_blocks != k_count for md in models):
        raise FusionError("all clients need the same number of blocks")
    stages: list[FusedStage] = []
    shape = models[0].spec.input_shape
    for k in range(k_count):
        branches = []
        for m, md in enumerate(models):
            adaptor = None
            if k > 0:
                prev = stages[-1]
                in_dim = md.spec.block_input_shape(k)[0]
                adaptor = make_adaptor(adaptor_kind, prev.branch_dims(), in_dim, seed=derive_seed(seed, "adaptor", m, k),
                                       spatial=len(prev.output_shape) > 1)
            branches.append(Branch(md.spec.blocks[k], md.block_params[k], adaptor))
        stage = fuse_stage(branches, order, shape)
        stages.append(stage)
        shape = stage.output_shape
    last = stages[-1]
    if adaptor_kind == "average":
        head = make_adaptor("average", last.branch_dims(), last.branch_dims()[0], 0, spatial=len(shape) > 1)
        cls_layers = models[0].spec.classifier
        cls_params = average_params([md.classifier_params for md in models], weights)
    else:
        head = None
        cls_layers = [Dense(int(np.prod(shape)), models[0].spec.num_classes)]
        cls_params = nn.init_params(cls_layers, seed)
    return FusedModel(stages, cls_layers, cls_params, head)
