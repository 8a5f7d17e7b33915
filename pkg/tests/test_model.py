import numpy as np
import pytest

from fusefl import nn
from fusefl.errors import ConfigError, FusionError
from fusefl.model import (
    Branch,
    ModelSpec,
    ScalingPolicy,
    SplitModel,
    build_client_spec,
    conv_template,
    fuse_models,
    fuse_stage,
    fused_features,
    fused_forward,
    make_adaptor,
    mlp_template,
    scale_width,
)
from fusefl.nn import Dense, ReLU


def digest(params):
    return b"".join(p.weights.tobytes() + p.bias.tobytes() for _, p in sorted(params.items()))


# --- scale_width -----------------------------------------------------------

@pytest.mark.parametrize("m,expected", [(10, 20), (20, 14), (50, 9), (1, 64)])
def test_scale_width_table(m, expected):
    assert scale_width(64, m) == expected


def test_scale_width_m5_rule_and_override():
    assert scale_width(64, 5) == 29
    assert scale_width(64, 5, ScalingPolicy("explicit", 32)) == 32
    with pytest.raises(ConfigError):
        ScalingPolicy("explicit")


# --- build_client_spec -----------------------------------------------------

def test_build_client_spec_identity():
    t = mlp_template((12,), 10, 64, depth=2, num_blocks=2)
    assert build_client_spec(t, 64) == t


def test_build_client_spec_substitution():
    t = mlp_template((12,), 10, 64, depth=2, num_blocks=2)
    c = build_client_spec(t, 20)
    dense = [l for l in c.layers() if isinstance(l, Dense)]
    assert [(d.in_dim, d.out_dim) for d in dense] == [(12, 20), (20, 20), (20, 10)]


@pytest.mark.parametrize("m", [5, 10, 20, 50])
def test_scaled_fused_param_ratio(m):
    t = conv_template()
    nf = scale_width(64, m)
    c = build_client_spec(t, nf)
    # the M-fold block count, hidden layers dominate: ratio ~ M * nf^2 / ns^2
    fused = m * sum(nn.count_params(b) for b in c.blocks) + nn.count_params([Dense(2 * nf, 10)])
    ratio = fused / t.count_params()
    assert 0.8 <= ratio <= 1.3
    assert 0.8 <= m * nf ** 2 / 64 ** 2 <= 1.3


def test_build_client_spec_rejects_zero():
    with pytest.raises(ConfigError):
        build_client_spec(mlp_template((4,), 3, 8), 0)


# --- fuse_stage --------------------------------------------------------------

def rand_block(seed, d_in=6, d_out=5):
    layers = [Dense(d_in, d_out), ReLU()]
    return layers, nn.init_params(layers, seed)


def test_fuse_single_branch_equals_branch():
    layers, params = rand_block(0)
    x = np.random.default_rng(0).normal(size=(4, 6))
    stage = fuse_stage([(layers, params)], [0], (6,))
    np.testing.assert_array_equal(stage(x), nn.predict(layers, params, x))


def test_fuse_identical_branches_duplicate():
    layers, params = rand_block(1)
    x = np.random.default_rng(1).normal(size=(3, 6))
    stage = fuse_stage([(layers, params), (layers, params)], [0, 1], (6,))
    h = nn.predict(layers, params, x)
    np.testing.assert_array_equal(stage(x), np.concatenate([h, h], axis=1))


def test_fuse_slices_match_branch_forward():
    blocks = [rand_block(s, 6, 3 + s) for s in range(3)]
    x = np.random.default_rng(2).normal(size=(5, 6))
    order = [2, 0, 1]
    out = fuse_stage(blocks, order, (6,))(x)
    pos = 0
    for m in order:
        ref = nn.predict(*blocks[m], x)
        np.testing.assert_array_equal(out[:, pos : pos + ref.shape[1]], ref)
        pos += ref.shape[1]
    assert pos == out.shape[1]


def test_fuse_is_a_frozen_deep_copy():
    layers, params = rand_block(3)
    stage = fuse_stage([(layers, params)], [0], (6,))
    params[0].weights[:] = 0.0
    assert all(not p.trainable for p in stage.branches[0].params.values())
    assert np.abs(stage.branches[0].params[0].weights).sum() > 0


def test_fuse_incompatible_inputs():
    with pytest.raises(FusionError):
        fuse_stage([rand_block(0, 6, 4), rand_block(1, 7, 4)], [0, 1], (6,))
    with pytest.raises(FusionError):
        fuse_stage([rand_block(0)], [1], (6,))


def test_branch_isolation():
    blocks = [rand_block(s) for s in range(3)]
    x = np.random.default_rng(4).normal(size=(5, 6))
    before = fuse_stage(blocks, [0, 1, 2], (6,))(x)
    blocks[1][1][0].weights += 1.0
    after = fuse_stage(blocks, [0, 1, 2], (6,))(x)
    np.testing.assert_array_equal(before[:, :5], after[:, :5])
    np.testing.assert_array_equal(before[:, 10:], after[:, 10:])
    assert not np.array_equal(before[:, 5:10], after[:, 5:10])


# --- adaptors ----------------------------------------------------------------

def test_average_adaptor_identity_and_mean():
    a = make_adaptor("average", [2, 2], 2, 0)
    t = np.array([[0.5, -1.0]])
    np.testing.assert_array_equal(a(np.concatenate([t, t], axis=1)), t)
    np.testing.assert_array_equal(a(np.array([[1.0, 1.0, 3.0, 3.0]])), [[2.0, 2.0]])


def test_average_adaptor_spatial():
    a = make_adaptor("average", [2, 2, 2], 2, 0, spatial=True)
    z = np.arange(2 * 6 * 2 * 2, dtype=float).reshape(2, 6, 2, 2)
    expected = (z[:, 0:2] + z[:, 2:4] + z[:, 4:6]) / 3
    np.testing.assert_allclose(a(z), expected, atol=1e-14)


def test_average_adaptor_rejects_unequal():
    with pytest.raises(ConfigError, match="linear_mix"):
        make_adaptor("average", [2, 3], 2, 0)


@pytest.mark.parametrize("spatial", [False, True])
def test_linear_mix_selector_picks_branch(spatial):
    dims = [3, 3, 3]
    a = make_adaptor("linear_mix", dims, 3, 0, spatial=spatial)
    sel = np.zeros((9, 3))
    sel[3:6] = np.eye(3)  # pick branch 1
    p = a.params[0]
    p.weights = sel if not spatial else sel.T.reshape(3, 9, 1, 1)
    p.bias = np.zeros(3)
    rng = np.random.default_rng(0)
    shape = (4, 9, 2, 2) if spatial else (4, 9)
    z = rng.normal(size=shape)
    np.testing.assert_allclose(a(z), z[:, 3:6], atol=1e-14)


# --- fused_forward -----------------------------------------------------------

def test_k1_m1_average_equals_plain_forward():
    spec = mlp_template((6,), 4, 8, depth=1, num_blocks=1)
    model = SplitModel.init(spec, 0)
    x = np.random.default_rng(0).normal(size=(5, 6))
    fused = fuse_models([model], "average")
    np.testing.assert_array_equal(fused_forward(fused, x), model.logits(x))


@pytest.mark.parametrize("m", [2, 3, 5])
def test_identical_clients_average_matches_single(m):
    spec = mlp_template((6,), 4, 8, depth=4, num_blocks=4)
    model = SplitModel.init(spec, 1)
    x = np.random.default_rng(1).normal(size=(7, 6))
    fused = fuse_models([model] * m, "average")
    np.testing.assert_allclose(fused_forward(fused, x), model.logits(x), rtol=0, atol=1e-12)


def test_identical_conv_clients_average_matches_single():
    spec = conv_template((1, 8, 8), 3, base_width=2, num_blocks=2)
    model = SplitModel.init(spec, 2)
    x = np.random.default_rng(2).normal(size=(3, 1, 8, 8))
    fused = fuse_models([model] * 3, "average")
    np.testing.assert_allclose(fused.logits(x), model.logits(x), atol=1e-10)


def test_permuted_order_with_permuted_mix_weights():
    spec = mlp_template((6,), 4, 4, depth=2, num_blocks=2)
    models = [SplitModel.init(spec, s) for s in range(3)]
    x = np.random.default_rng(3).normal(size=(5, 6))
    base = fuse_models(models, "linear_mix", order=[0, 1, 2], seed=9)
    perm = [2, 0, 1]
    other = fuse_models(models, "linear_mix", order=perm, seed=9)
    # rows of each stage-2 mixing matrix follow the concatenation order
    for m in range(3):
        w = base.stages[1].branches[m].adaptor.params[0].weights
        other.stages[1].branches[m].adaptor.params[0].weights = np.concatenate([w[4 * j : 4 * j + 4] for j in perm])
        other.stages[1].branches[m].adaptor.params[0].bias = base.stages[1].branches[m].adaptor.params[0].bias
    w = base.classifier_params[0].weights
    other.classifier_params[0].weights = np.concatenate([w[4 * j : 4 * j + 4] for j in perm])
    other.classifier_params[0].bias = base.classifier_params[0].bias
    np.testing.assert_allclose(other.logits(x), base.logits(x), atol=1e-12)


def test_fused_features_stage_mismatch():
    spec = mlp_template((6,), 4, 4, depth=2, num_blocks=2)
    fused = fuse_models([SplitModel.init(spec, 0)], "average")
    with pytest.raises(Exception, match="stage 1"):
        fused_features(fused.stages, np.zeros((2, 5)))


def test_hetero_branches_with_linear_mix():
    t = mlp_template((6,), 4, 8, depth=2, num_blocks=2)
    models = [SplitModel.init(build_client_spec(t, w), i) for i, w in enumerate([8, 16, 24])]
    fused = fuse_models(models, "linear_mix")
    assert fused.stages[0].output_shape == (48,)
    out = fused.logits(np.zeros((2, 6)))
    assert out.shape == (2, 4)
    with pytest.raises(ConfigError):
        fuse_models(models, "average")


@pytest.mark.parametrize("m", [5, 10, 20, 50])
def test_size_budget_fused_model(m):
    t = conv_template()
    c = build_client_spec(t, scale_width(64, m))
    avg = fuse_models([SplitModel.init(c, 0)] * m, "average")
    assert 0.8 <= avg.count_params() / t.count_params() <= 1.3
