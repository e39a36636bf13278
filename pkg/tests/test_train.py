import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycdec import iue, train
from cycdec import numcore as nc
from cycdec.data import DataError, SynthConfig, synth_generate
from cycdec.model import Decoder, DecoderConfig
from cycdec.numcore import Param
from cycdec.train import LossWeights

from test_iue import make_trace


def tiny_config(**kw):
    base = dict(n_channels=3, n_times=60, n_classes=4, temporal_kernel=5, temporal_filters=2,
                pool_stride=5, windows=(8,), d=4, d_h=6, L_max=3)
    base.update(kw)
    return DecoderConfig(**base)


# ----------------------------------------------------------------- objective

def test_total_loss_without_reliability_head_is_last_cycle_ce():
    rng = np.random.default_rng(0)
    tr = make_trace(rng.normal(size=(3, 2, 4)), rng.uniform(size=(3, 2)))
    y = [1, 3]
    got = train.total_loss(tr, y, None, LossWeights(0.3, 0.7, iue_enabled=False)).item()
    assert got == nc.cross_entropy(tr.outputs[-1].logits, y).item()


def test_total_loss_with_zero_weights_is_final_ce():
    rng = np.random.default_rng(1)
    tr = make_trace(rng.normal(size=(3, 2, 4)), rng.uniform(size=(3, 2)))
    y = [0, 2]
    got = train.total_loss(tr, y, np.full(3, 0.5), LossWeights(0.0, 0.0), tau_ens=2.0).item()
    assert got == nc.cross_entropy(iue.aggregate(tr, 2.0), y).item()


def test_matched_supervision_is_zero():
    r = np.array([[1.0, 0.0, 1.0], [1.0, 0.0, 0.3]])
    assert train.iue_supervision_loss(r, np.array([1.0, 0.0, 0.9])).item() < 1e-9
    rr = np.array([[0.2, 0.7, 0.5]])
    assert train.iue_supervision_loss(rr, np.array([0.2, 0.7, 0.1]), kind="mse").item() == 0.0


def test_total_loss_requires_targets():
    tr = make_trace(np.zeros((2, 1, 4)))
    with pytest.raises(train.ContractError):
        train.total_loss(tr, [0], None, LossWeights())
    with pytest.raises(train.ContractError):
        train.total_loss(tr, [0], np.zeros(3), LossWeights())


def test_total_loss_adds_weighted_terms():
    rng = np.random.default_rng(2)
    tr = make_trace(rng.normal(size=(3, 2, 4)), rng.uniform(0.1, 0.9, size=(3, 2)))
    y, t = [0, 1], np.array([0.3, 0.6, 0.8])
    final, alpha = iue.aggregate(tr, 4.0, return_weights=True)
    r = np.stack([x.data for x in tr.reliabilities], axis=1)
    expect = (nc.cross_entropy(final, y).item()
              + 0.2 * train.halting_regularizer(alpha).item()
              + 0.4 * train.iue_supervision_loss(r, t).item())
    got = train.total_loss(tr, y, t, LossWeights(0.2, 0.4)).item()
    assert abs(got - expect) < 1e-12


def test_halting_regularizer_examples():
    assert train.halting_regularizer([[1.0, 0.0, 0.0]]).item() == 0.0
    assert train.halting_regularizer([[0.0, 0.0, 1.0]]).item() == 1.0
    assert abs(train.halting_regularizer([[1 / 3] * 3]).item() - 0.5) < 1e-15
    assert train.halting_regularizer([[1.0]]).item() == 0.0


def test_halting_regularizer_gradient():
    a = Param(np.random.default_rng(3).uniform(size=(2, 4)), "alpha")
    rep = nc.grad_check(lambda: train.halting_regularizer(a), [a], h=1e-6)
    assert rep.passed
    np.testing.assert_allclose(a.grad, np.tile(np.arange(4) / 3 / 2, (2, 1)), atol=1e-15)


def test_supervision_examples():
    assert abs(train.iue_supervision_loss(np.full(3, 0.5), np.full(3, 0.5)).item() - np.log(2)) < 1e-12
    assert train.iue_supervision_loss(np.array([0.3]), np.array([0.9])).item() == 0.0
    with pytest.raises(ValueError):
        train.iue_supervision_loss(np.full(3, 0.5), np.full(3, 0.5), kind="hinge")


@pytest.mark.parametrize("t", [0.1, 0.35, 0.5, 0.8])
def test_supervision_minimum_sits_at_target(t):
    grid = np.linspace(0.01, 0.99, 99)
    vals = [train.iue_supervision_loss(np.array([g, 0.5]), np.array([t, 0.0])).item() for g in grid]
    assert abs(grid[int(np.argmin(vals))] - t) < 0.011
    entropy = -(t * np.log(t) + (1 - t) * np.log(1 - t))
    at_t = train.iue_supervision_loss(np.array([t, 0.5]), np.array([t, 0.0])).item()
    assert abs(at_t - entropy) < 1e-12
    assert min(vals) >= at_t - 1e-12


# ----------------------------------------------------------------- optimiser

def test_adam_zero_gradient_leaves_params():
    p = Param(np.array([1.0, -2.0]), "p")
    state = train.optimizer_step([p], [np.zeros(2)], train.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_descends_on_square():
    theta = Param(np.array([1.0]), "theta")
    opt = train.Adam([theta], lr=1e-3)
    opt.zero_grad()
    nc.sum(nc.square(theta)).backward()
    opt.step()
    assert theta.data[0] < 1.0
    # bias correction makes the first step exactly lr in magnitude
    assert abs(theta.data[0] - (1.0 - 1e-3)) < 1e-9


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(4)
        p = Param(rng.normal(size=3), "p")
        state = train.AdamState()
        for _ in range(10):
            train.optimizer_step([p], [2 * p.data + rng.normal(size=3)], state, lr=0.05)
        return p.data.copy()
    assert run().tobytes() == run().tobytes()


# ----------------------------------------------------------------- training loop

def _toy_data(seed=0, n=24):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3, 60)), np.arange(n) % 4


def test_fit_zero_epochs_returns_initialisation():
    model = Decoder(tiny_config(), seed=5)
    init = model.state_dict()
    X, y = _toy_data()
    ckpt = train.fit(model, (X, y), (X, y), epochs=0)
    assert ckpt.epoch == 0
    for k in init:
        np.testing.assert_array_equal(ckpt.params[k], init[k])


def test_fit_keeps_earliest_of_tied_best_epochs():
    model = Decoder(tiny_config(), seed=0)
    X, y = _toy_data()
    scores = {0: 0.0, 1: 0.3, 2: 0.7, 3: 0.7}
    seen = []
    ckpt = train.fit(model, (X, y), (X, y), epochs=3, cfg=train.TrainConfig(batch_size=12),
                     evaluate=lambda m, ep: scores[ep],
                     on_epoch=lambda ep, loss, acc: seen.append(model.state_dict()))
    assert ckpt.epoch == 2 and ckpt.val_accuracy == 0.7
    for k, v in ckpt.params.items():
        np.testing.assert_array_equal(v, seen[1][k])


def test_fit_rejects_empty_sets():
    model = Decoder(tiny_config(), seed=0)
    X, y = _toy_data()
    with pytest.raises(DataError):
        train.fit(model, (X[:0], y[:0]), (X, y), epochs=1)
    with pytest.raises(DataError):
        train.fit(model, (X, y), (X[:0], y[:0]), epochs=1)


def test_fit_is_deterministic():
    X, y = _toy_data()
    out = []
    for _ in range(2):
        model = Decoder(tiny_config(), seed=1)
        ckpt = train.fit(model, (X, y), (X, y), epochs=2,
                         cfg=train.TrainConfig(batch_size=8, lr=3e-3, seed=9))
        out.append(train.checkpoint_bytes(ckpt))
    assert out[0] == out[1]


def test_fit_learns_separable_synthetic_set():
    ts = synth_generate(SynthConfig(n_subjects=2, trials_per_class=20, C=4, T=150, active_channels=2,
                                    noise_std=0.5, class_freqs=(6.0, 12.0, 20.0, 30.0)))
    rng = np.random.default_rng(0)
    idx = rng.permutation(len(ts))
    tr, va = idx[:120], idx[120:]
    cfg = DecoderConfig(n_channels=4, n_times=150, windows=(8,), d=4, d_h=16, L_max=3)
    model = Decoder(cfg, seed=0)
    ckpt = train.fit(model, (ts.trials[tr], ts.labels[tr]), (ts.trials[va], ts.labels[va]),
                     cfg=train.TrainConfig(epochs=25, batch_size=16, lr=3e-3))
    assert ckpt.val_accuracy >= 0.9


# ----------------------------------------------------------------- checkpoints

def _checkpoint(**kw):
    model = Decoder(tiny_config(**kw), seed=3)
    return train.Checkpoint(model.state_dict(), model.cfg, epoch=4, val_accuracy=0.625)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ckpt = _checkpoint()
    path = tmp_path / "model.cyc"
    train.save_checkpoint(path, ckpt)
    back = train.load_checkpoint(path)
    assert back.config == ckpt.config
    assert (back.epoch, back.val_accuracy) == (4, 0.625)
    assert list(back.params) == list(ckpt.params)
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()
    assert train.checkpoint_bytes(back) == path.read_bytes()
    X = np.random.default_rng(0).normal(size=(3, 3, 60))
    np.testing.assert_array_equal(back.build().predict_logits(X)[0],
                                  ckpt.build().predict_logits(X)[0])


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_checkpoint_single_byte_corruption_detected(data):
    buf = bytearray(train.checkpoint_bytes(_checkpoint()))
    pos = data.draw(st.integers(0, len(buf) - 1))
    delta = data.draw(st.integers(1, 255))
    buf[pos] = (buf[pos] + delta) % 256
    with pytest.raises(train.CheckpointFormatError):
        train.parse_checkpoint(bytes(buf))


def test_checkpoint_truncation_detected():
    buf = train.checkpoint_bytes(_checkpoint())
    for cut in (0, 3, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(train.CheckpointFormatError):
            train.parse_checkpoint(buf[:cut])


def test_baseline_checkpoint_round_trip():
    ckpt = _checkpoint(use_mhsp=False, use_iue=False)
    back = train.parse_checkpoint(train.checkpoint_bytes(ckpt))
    assert set(back.params) == {"backbone.temporal", "backbone.spatial", "backbone.bias",
                                "base.W", "base.b"}
