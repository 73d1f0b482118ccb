import math
import warnings

import numpy as np
import pytest

from sigmatch.embedder import NetworkConfig, init_kaiming
from sigmatch.errors import DimensionError, DivergenceError
from sigmatch.featurestore import generate_synthetic
from sigmatch.trainer import (HISTORY_COLUMNS, Decoder, SGDMomentum, TrainConfig, TrainHistory,
                              format_train_config, parse_key_values, train, train_autoencoder,
                              train_config_from_mapping, validate)


def small_net(d=128, seed=0, **kw):
    return init_kaiming(NetworkConfig(d, 64, 32, **kw), seed=seed)


def params_snapshot(net):
    return {k: v.copy() for k, v in net.params().items()}


class FixedEmbedding:
    """Stands in for a network: returns precomputed signatures."""

    def __init__(self, sigs):
        self.sigs = np.asarray(sigs)

    def embed(self, features):
        return self.sigs


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_descends_on_hard_data(seed):
    ds = generate_synthetic(50, 4, 128, 1.0, 1.0, seed=seed)
    _, h = train(small_net(seed=seed), ds,
                 cfg=TrainConfig(epochs=2, batch_size=100, seed=seed, stop_when_separated=False))
    assert h.loss[0] > 0
    assert h.loss[1] < h.loss[0]


def test_separable_data_stops_at_zero_active():
    ds = generate_synthetic(50, 4, 128, 0.05, 1.0, seed=1)
    _, h = train(small_net(), ds, cfg=TrainConfig(epochs=10, batch_size=100))
    assert h.active_triplets[-1] == 0 and h.loss[-1] == 0.0
    assert len(h) < 10


def test_training_reaches_zero_active():
    ds = generate_synthetic(50, 4, 128, 0.8, 1.0, seed=0)
    _, h = train(small_net(), ds, cfg=TrainConfig(epochs=50, batch_size=100))
    assert h.active_triplets[0] > 0
    assert h.active_triplets[-1] == 0


def test_zero_learning_rate_keeps_parameters():
    ds = generate_synthetic(30, 4, 128, 1.0, 1.0, seed=0)
    net = small_net()
    before = params_snapshot(net)
    _, h = train(net, ds, cfg=TrainConfig(epochs=3, batch_size=60, learning_rate=0.0,
                                          stop_when_separated=False))
    assert sum(h.active_triplets) > 0
    for k, v in before.items():
        assert np.array_equal(v, net.params()[k]), k


def test_batch_without_active_tuples_does_not_update():
    ds = generate_synthetic(20, 4, 128, 0.01, 1.0, seed=0)
    net = small_net()
    before = params_snapshot(net)
    _, h = train(net, ds, cfg=TrainConfig(epochs=2, batch_size=40, stop_when_separated=False))
    assert h.active_triplets == [0, 0]
    for k, v in before.items():
        assert np.array_equal(v, net.params()[k]), k


def test_training_is_deterministic():
    ds = generate_synthetic(30, 4, 128, 1.0, 1.0, seed=0)
    runs = []
    for _ in range(2):
        net = small_net()
        _, h = train(net, ds, cfg=TrainConfig(epochs=3, batch_size=60, seed=4))
        runs.append((net, h))
    assert runs[0][1].loss == runs[1][1].loss
    for k, v in runs[0][0].state().items():
        assert np.array_equal(v, runs[1][0].state()[k])


def test_quadruplet_training_runs():
    ds = generate_synthetic(40, 4, 128, 1.0, 1.0, seed=0)
    _, h = train(small_net(), ds, cfg=TrainConfig(epochs=3, batch_size=80, loss_kind="quadruplet",
                                                  stop_when_separated=False))
    assert all(math.isfinite(x) for x in h.loss)
    assert h.loss[-1] < h.loss[0]


def test_momentum_recurrence_single_parameter():
    p = np.array([1.0])
    opt = SGDMomentum(0.1, 0.9)
    grads = [0.5, -0.2, 0.3, 0.0, 1.0]
    v, expected = 0.0, 1.0
    for g in grads:
        before = p.copy()
        opt.step({"w": p}, {"w": np.array([g])})
        v = 0.9 * v + g
        expected -= 0.1 * v
        assert p[0] == pytest.approx(expected, abs=1e-15)
        assert before[0] - p[0] == pytest.approx(0.1 * opt.velocity["w"][0], abs=1e-15)


def test_divergence_detected():
    ds = generate_synthetic(50, 4, 16, 1.0, 1.0, seed=0)
    net = init_kaiming(NetworkConfig(16, 16, 16, hidden_activation="linear"), seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(DivergenceError) as info:
            train(net, ds, cfg=TrainConfig(epochs=5, batch_size=100, learning_rate=1e30))
    assert info.value.epoch == 1
    assert "epoch 1" in str(info.value)


def test_dimension_mismatch():
    ds = generate_synthetic(5, 2, 8, 0.1, 1.0)
    with pytest.raises(DimensionError):
        train(small_net(), ds)


def test_validation_overlap_rejected():
    ds = generate_synthetic(6, 2, 128, 0.1, 1.0)
    with pytest.raises(ValueError):
        train(small_net(), ds, val_ds=ds)


def test_history_with_validation(tmp_path):
    ds = generate_synthetic(60, 4, 128, 1.0, 1.0, seed=0)
    train_ds, val_ds = ds.select_classes(range(40)), ds.select_classes(range(40, 60))
    _, h = train(small_net(), train_ds, val_ds,
                 TrainConfig(epochs=3, batch_size=80, stop_when_separated=False))
    assert len(h) == 3 and all(0 <= a <= 1 for a in h.val_accuracy)
    path = tmp_path / "history.csv"
    h.save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS)
    assert len(lines) == 4
    assert lines[1].split(",")[0] == "1"


def test_history_csv_empty_validation():
    h = TrainHistory()
    h.append(1, 2.5, 3, None, 0.1, 0.01)
    assert h.to_csv().splitlines()[1] == "1,2.5,3,,0.1"


def test_validate_perfect_separation():
    ds = generate_synthetic(20, 3, 8, 1e-9, 1.0, seed=0)
    sigs = np.eye(20)[ds.labels]
    assert validate(FixedEmbedding(sigs), ds, 0.6, seed=0) == 1.0


def test_validate_random_is_chance():
    ds = generate_synthetic(100, 5, 4, 0.1, 1.0, seed=0)
    sigs = np.random.default_rng(0).standard_normal((len(ds), 64))
    accs = [validate(FixedEmbedding(sigs), ds, 0.6, seed=s) for s in range(5)]
    n = 60 * 4
    p = 1 / 60
    sd = math.sqrt(p * (1 - p) / n)
    assert abs(float(np.mean(accs)) - p) <= 4 * sd
    assert validate(FixedEmbedding(sigs), ds, 0.6, seed=3) == accs[3]


def test_autoencoder_loss_decreases():
    ds = generate_synthetic(50, 4, 64, 0.5, 1.0, seed=0)
    net = init_kaiming(NetworkConfig(64, 32, 16), seed=0)
    _, h = train_autoencoder(net, ds, TrainConfig(epochs=5, batch_size=50))
    assert len(h) == 5
    assert h.loss[4] < h.loss[0]
    assert all(b <= a * 1.05 for a, b in zip(h.loss, h.loss[1:]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_autoencoder_reaches_near_zero(seed):
    # full-batch so the batch-norm statistics are the same every step and the
    # encoder is one fixed invertible linear map
    ds = generate_synthetic(50, 4, 4, 0.5, 1.0, seed=seed)
    net = init_kaiming(NetworkConfig(4, 4, 4, hidden_activation="linear"), seed=seed, dtype=np.float64)
    _, h = train_autoencoder(net, ds, TrainConfig(epochs=2000, batch_size=200, learning_rate=0.03,
                                                  seed=seed))
    assert h.loss[-1] <= 1e-3 * h.loss[0]


def test_autoencoder_zero_learning_rate_keeps_encoder():
    ds = generate_synthetic(20, 4, 16, 0.5, 1.0, seed=0)
    net = init_kaiming(NetworkConfig(16, 8, 4), seed=0)
    before = params_snapshot(net)
    train_autoencoder(net, ds, TrainConfig(epochs=2, batch_size=20, learning_rate=0.0))
    for k, v in before.items():
        assert np.array_equal(v, net.params()[k])


def test_autoencoder_via_loss_kind():
    ds = generate_synthetic(20, 4, 16, 0.5, 1.0, seed=0)
    net = init_kaiming(NetworkConfig(16, 8, 4), seed=0)
    _, h = train(net, ds, cfg=TrainConfig(epochs=2, batch_size=20, loss_kind="autoencoder"))
    assert len(h) == 2 and h.active_triplets == [0, 0]


def test_decoder_gradients_match_fd():
    dec = Decoder(3, 5, 4, "tanh", seed=0, dtype=np.float64)
    r = np.random.default_rng(0)
    s, R = r.standard_normal((6, 3)), r.standard_normal((6, 4))
    out, cache = dec.forward(s)
    grads, g_s = dec.backward(cache, R)
    h = 1e-6
    for name, p in dec.params().items():
        num = np.zeros_like(p)
        for i in np.ndindex(*p.shape):
            o = p[i]
            p[i] = o + h
            up = np.sum(R * dec.forward(s)[0])
            p[i] = o - h
            down = np.sum(R * dec.forward(s)[0])
            p[i] = o
            num[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(grads[name], num, rtol=1e-5, atol=1e-8)
    num_s = np.zeros_like(s)
    for i in np.ndindex(*s.shape):
        sp, sm = s.copy(), s.copy()
        sp[i] += h
        sm[i] -= h
        num_s[i] = (np.sum(R * dec.forward(sp)[0]) - np.sum(R * dec.forward(sm)[0])) / (2 * h)
    np.testing.assert_allclose(g_s, num_s, rtol=1e-5, atol=1e-8)


def test_config_file_round_trip():
    text = "# run\nmargin = 1.5\nbatch-size=64\nloss_kind=quadruplet\nstop_when_separated=no\n\nmargin2=none\n"
    cfg = train_config_from_mapping(parse_key_values(text))
    assert (cfg.margin, cfg.batch_size, cfg.loss_kind, cfg.stop_when_separated) == (1.5, 64, "quadruplet", False)
    assert cfg.margin2 is None
    again = train_config_from_mapping(parse_key_values(format_train_config(cfg)))
    assert again == cfg


def test_config_errors():
    with pytest.raises(ValueError):
        parse_key_values("margin 1.5")
    with pytest.raises(ValueError):
        train_config_from_mapping({"learning_rat": "0.1"})
    with pytest.raises(ValueError):
        TrainConfig(loss_kind="softmax")
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_config_defaults():
    cfg = TrainConfig()
    assert cfg.margin == 1.75 and cfg.batch_size == 1000
    assert cfg.learning_rate == 0.01 and cfg.momentum == 0.9
    assert cfg.quadruplet_margins().alpha1 == cfg.quadruplet_margins().alpha2 == 1.75
