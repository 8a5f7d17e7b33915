import numpy as np
import pytest

from fusefl.data import Dataset, SemConfig, synth_sem
from fusefl.errors import ProbeError
from fusefl.federation import FedConfig, run_fusefl, train_local
from fusefl.model import SplitModel, chain, conv_template, mlp_template, unchain
from fusefl.nn import Dense
from fusefl.probes import (
    ProbeConfig,
    estimate_mi_x,
    estimate_mi_y,
    label_entropy,
    linear_separability,
    mirror_decoder,
    reconstruction_error,
    run_probes,
)


class Injected:
    """A one-stage 'model' whose stage-1 features are supplied directly."""

    def __init__(self, table: dict, shape):
        self.table, self.shape, self.num_stages = table, shape, 1

    def features(self, x, k):
        return self.table[k](x)

    def stage_shapes(self, k):
        return [(1,), self.shape][: k + 1]


def indexed(labels, c):
    return Dataset(np.arange(len(labels), dtype=float)[:, None], labels, c)


def snapshot(model):
    return b"".join(p.weights.tobytes() + p.bias.tobytes() for ps in model.all_params() for p in ps.values())


@pytest.fixture(scope="module")
def trained():
    clients, test = synth_sem(SemConfig(num_clients=1, samples_per_client=1500, spurious_strength=0.0), 0)
    t = mlp_template(clients[0].inputs.shape[1:], 10, 32, depth=4, num_blocks=4)
    model = SplitModel.init(t, 0)
    layers, params = chain(model.parts())
    params, _ = train_local(clients[0], layers, params, 20, FedConfig(learning_rate=0.02))
    parts = unchain(params, [len(b) for b in t.blocks] + [len(t.classifier)])
    return SplitModel(t, parts[:-1], parts[-1]), clients[0], test


def test_one_hot_features_are_perfectly_informative():
    y = np.arange(1000) % 10
    onehot = np.eye(10)[y]
    model = Injected({1: lambda x: onehot[x[:, 0].astype(int)]}, (10,))
    data = indexed(y, 10)
    cfg = ProbeConfig(probe_epochs=30, learning_rate=0.5)
    assert abs(estimate_mi_y(model, 1, data, cfg) - np.log(10)) < 0.1
    assert linear_separability(model, 1, data, data, cfg) == 1.0


def test_independent_features_carry_no_label_information():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(2000, 8))
    y = rng.integers(0, 10, size=2000)
    model = Injected({1: lambda x: feats[x[:, 0].astype(int)]}, (8,))
    est = estimate_mi_y(model, 1, indexed(y, 10))
    assert 0 <= est < 0.1


def test_mi_y_rejects_single_class():
    model = Injected({1: lambda x: x}, (1,))
    with pytest.raises(ProbeError):
        estimate_mi_y(model, 1, indexed(np.zeros(10, int), 3))


def test_identity_stage_reconstructs_exactly(trained):
    model, data, _ = trained
    assert reconstruction_error(model, 0, data) < 1e-6
    assert estimate_mi_x(model, 0, data) == pytest.approx(0.0, abs=1e-6)


def test_zero_features_reconstruct_to_the_mean():
    rng = np.random.default_rng(1)
    x = rng.normal(2.0, 1.5, size=(800, 3))
    model = Injected({1: lambda z: np.zeros((len(z), 4))}, (4,))
    data = Dataset(x, np.zeros(800, int), 2)
    model.stage_shapes = lambda k: [(3,), (4,)][: k + 1]
    r = reconstruction_error(model, 1, data, ProbeConfig(probe_epochs=60, learning_rate=0.05))
    oracle = np.mean((x - x.mean(axis=0)) ** 2)  # best constant predictor
    assert r == pytest.approx(oracle, rel=0.02)


def test_decoder_shape_mismatch():
    model = Injected({1: lambda z: np.zeros((len(z), 4))}, (4,))
    data = Dataset(np.zeros((10, 3)), np.zeros(10, int), 2)
    with pytest.raises(ProbeError):
        reconstruction_error(model, 1, data, decoder=[Dense(4, 5)])


def test_mirror_decoder_shapes():
    from fusefl import nn
    conv = conv_template((1, 8, 8), 3, base_width=2)
    shapes = [conv.block_input_shape(j) for j in range(4)]  # up to stage 3 (spatial 2x2)
    dec = mirror_decoder(shapes)
    assert nn.output_shape(dec, shapes[-1]) == (1, 8, 8)
    flat = [(1, 4, 4), (12,), (7,)]
    assert nn.output_shape(mirror_decoder(flat), (7,)) == (1, 4, 4)
    assert mirror_decoder([(5,)]) == []


def test_random_features_separability_baseline(trained):
    model, data, test = trained
    t = model.spec
    rand = SplitModel.init(t, 99)
    cfg = ProbeConfig()
    base = linear_separability(rand, 4, data, test, cfg)
    trained_acc = linear_separability(model, 4, data, test, cfg)
    assert base < trained_acc
    assert 0.05 <= linear_separability(rand, 4, Dataset(data.inputs, np.random.default_rng(0).permutation(data.labels), 10),
                                       test, cfg) <= 0.3


def test_probes_leave_model_untouched_and_bounded(trained):
    model, data, test = trained
    before = snapshot(model)
    res = run_probes(model, data, test, ProbeConfig())
    assert snapshot(model) == before
    h = label_entropy(data.labels, 10)
    for r in res.records:
        assert 0 <= r["mi_y"] <= h
        assert 0 <= r["separability"] <= 1
        assert r["separability"] >= np.bincount(test.labels).max() / len(test) - 0.05
    assert len(res.rows()) == 3 * 4


def test_input_information_trend(trained):
    # the deepest stage keeps no more of x than the first one (3 probe seeds)
    model, data, _ = trained
    first = np.mean([estimate_mi_x(model, 1, data, ProbeConfig(seed=s)) for s in range(3)])
    last = np.mean([estimate_mi_x(model, 4, data, ProbeConfig(seed=s)) for s in range(3)])
    spread = abs(first - last) + 1e-12
    assert last <= first + 0.05 * spread


def test_stage_range_and_fused_model():
    clients, test = synth_sem(SemConfig(num_clients=2, samples_per_client=100), 0)
    t = mlp_template(clients[0].inputs.shape[1:], 10, 8, depth=2, num_blocks=2)
    _, fused = run_fusefl(FedConfig(num_clients=2, epochs=2, template=t), clients)
    with pytest.raises(ProbeError):
        linear_separability(fused, 3, clients[0], test)
    with pytest.raises(ProbeError):
        linear_separability(fused, 0, clients[0], test)
    assert -np.inf < estimate_mi_x(fused, 2, clients[0]) <= 0
