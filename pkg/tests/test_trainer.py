import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ensemble_coefficients_oracle, triangular2_oracle
from saltseg import data as D
from saltseg import tensor as T
from saltseg import trainer as TR
from saltseg.errors import ConfigurationError, DimensionError, NumericError
from saltseg.model import ModelConfig, build_model
from saltseg.serialization import load_checkpoint, read_weights


def tiny_model_config():
    return ModelConfig(base_filters=4, encoder_blocks=(1, 1, 1, 1), cardinality=2, se_reduction=2, input_size=16)


def quick_config(**kw):
    base = dict(batch_size=4, phase1_epochs=2, max_epochs=4, early_stop_patience=10, cycle_epochs=2,
                augment=D.AugmentPolicy(hflip=0.5))
    base.update(kw)
    return TR.TrainConfig(**base)


# -- cyclic lr ------------------------------------------------------------------------

def test_cyclic_lr_examples():
    assert TR.cyclic_lr(0, 1e-4, 1e-2, 5) == 1e-4
    assert TR.cyclic_lr(5, 1e-4, 1e-2, 5) == 1e-2
    assert abs(TR.cyclic_lr(15, 1e-4, 1e-2, 5) - (1e-4 + (1e-2 - 1e-4) / 2)) < 1e-15
    with pytest.raises(ValueError):
        TR.cyclic_lr(0, 1e-4, 1e-2, 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 500), st.integers(1, 20), st.floats(1e-5, 1e-2), st.floats(1.0, 100.0))
def test_cyclic_lr_matches_piecewise_oracle(it, step, base, ratio):
    peak = base * ratio
    got = TR.cyclic_lr(it, base, peak, step)
    assert abs(got - triangular2_oracle(it, base, peak, step)) <= 1e-12 * peak
    assert base - 1e-15 <= got <= peak + 1e-15


# -- adam -------------------------------------------------------------------------------

def test_adam_first_step_closed_form():
    p = T.Tensor(np.array([1.0, -2.0, 0.5]))
    g = np.array([0.3, -1e-3, 0.0])
    state = TR.AdamState()
    TR.adam_step({"w": p}, {"w": g}, state, 0.01)
    # m_hat = g, v_hat = g^2 after bias correction
    want = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, want, rtol=0, atol=1e-15)
    assert state.t == 1


def test_adam_zero_grad_noop():
    p = T.Tensor(np.arange(4.0))
    state = TR.AdamState()
    TR.adam_step({"w": p}, {"w": None}, state, 0.1)
    TR.adam_step({"w": p}, {"w": np.zeros(4)}, state, 0.1)
    np.testing.assert_array_equal(p.data, np.arange(4.0))
    assert state.t == 2


def test_adam_deterministic_and_shape_checked():
    def run():
        rng = np.random.default_rng(0)
        p = T.Tensor(rng.normal(size=(3, 3)))
        s = TR.AdamState()
        for _ in range(25):
            TR.adam_step({"w": p}, {"w": np.sin(p.data) + rng.normal(size=(3, 3))}, s, 1e-3)
        return p.data
    assert np.array_equal(run(), run())
    with pytest.raises(DimensionError):
        TR.adam_step({"w": T.Tensor(np.zeros(3))}, {"w": np.zeros(4)}, TR.AdamState(), 0.1)


# -- snapshots ----------------------------------------------------------------------------

def snap(iou, epoch, w=None):
    return TR.Snapshot({"w": np.full(2, float(epoch) if w is None else w)}, iou, epoch)


def test_update_snapshots_cases():
    assert [s.epoch for s in TR.update_snapshots([], snap(0.3, 1), 3)] == [1]
    full = [snap(0.1 * i, i) for i in range(1, 10)]
    assert TR.update_snapshots(full, snap(0.05, 20), 9) == full
    out = TR.update_snapshots(full, snap(0.95, 20), 9)
    assert [s.val_iou for s in out] == [0.1 * i for i in range(2, 10)] + [0.95]


def test_update_snapshots_tie_prefers_later():
    pool = [snap(0.5, 1), snap(0.7, 2)]
    out = TR.update_snapshots(pool, snap(0.5, 3), 2)
    assert [s.epoch for s in out] == [3, 2]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.integers(1, 10))
def test_snapshot_pool_matches_simulation(ious, keep):
    pool = []
    for e, v in enumerate(ious, 1):
        pool = TR.update_snapshots(pool, snap(v, e), keep)
        keys = [(s.val_iou, s.epoch) for s in pool]
        assert keys == sorted(keys) and len(pool) <= keep
    # direct simulation: top-`keep` of all candidates by (iou, epoch)
    want = sorted(((v, e) for e, v in enumerate(ious, 1)))[-keep:]
    assert [(s.val_iou, s.epoch) for s in pool] == want


# -- ensembling ------------------------------------------------------------------------------

def test_ensemble_coefficients_m10_half():
    c = TR.ensemble_coefficients(10, 0.5)
    assert c == [1 / 2 ** k for k in range(1, 10)] + [1 / 512]
    assert c == ensemble_coefficients_oracle(10, 0.5)


@pytest.mark.parametrize("alpha", [round(0.1 * i, 1) for i in range(1, 10)])
def test_ensemble_coefficients_sum(alpha):
    for m in range(1, 33):
        assert abs(sum(TR.ensemble_coefficients(m, alpha)) - 1.0) < 1e-12


def test_ensemble_weights_formula():
    rng = np.random.default_rng(0)
    for m in (1, 2, 5, 10):
        for alpha in (0.2, 0.5, 0.9):
            pool = [TR.Snapshot({"a": rng.normal(size=(3, 2))}, 0.1 * i, i) for i in range(m)]
            got = TR.ensemble_weights(pool, alpha)["a"]
            coeffs = ensemble_coefficients_oracle(m, alpha)
            want = sum(c * s.weights["a"] for c, s in zip(coeffs, pool[::-1]))
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_ensemble_m2_and_fixed_point():
    w1, w2 = np.array([1.0, 3.0]), np.array([5.0, -1.0])
    out = TR.ensemble_weights([TR.Snapshot({"a": w1}, 0.1, 1), TR.Snapshot({"a": w2}, 0.2, 2)], 0.5)
    np.testing.assert_array_equal(out["a"], 0.5 * w1 + 0.5 * w2)
    w = np.random.default_rng(1).normal(size=100)
    for alpha in (0.1, 0.3, 0.5, 0.7):
        pool = [TR.Snapshot({"a": w.copy()}, 0.1 * i, i) for i in range(7)]
        assert np.array_equal(TR.ensemble_weights(pool, alpha)["a"], w)
    with pytest.raises(ValueError):
        TR.ensemble_weights([], 0.5)


def test_recompute_bn_stats_equal_weight():
    cfg = tiny_model_config()
    m = build_model(cfg, 0)
    samples = D.generate_synthetic(6, 16, seed=2)
    lo, hi = D.depth_range(samples)
    TR.recompute_bn_stats(m, samples, lo, hi, 3)
    got = m.buffers["stem.bn.running_mean"].copy()
    # reference: stem activations are the first layer, so batch means are directly computable
    means = []
    for start in (0, 3):
        x = D.build_batch(samples[start:start + 3], lo, hi, cfg)
        z = T.conv2d(x, m.params["stem.conv.weight"], None, padding=1).data
        means.append(z.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(got, np.mean(means, axis=0), rtol=0, atol=1e-12)


# -- train_fold -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    return D.generate_synthetic(8, 16, seed=5)


def test_train_fold_history_and_lr_trace(tiny_data):
    cfg = quick_config()
    m, pool, hist = TR.train_fold(build_model(tiny_model_config(), 1), tiny_data[:6], tiny_data[6:], cfg)
    assert len(hist.rows) == 4
    assert [r["phase"] for r in hist.rows] == [1, 1, 2, 2]
    iters = 2  # ceil(6 / 4)
    step = round(cfg.cycle_epochs * iters / 2)
    assert hist.lr_trace == [TR.cyclic_lr(i, cfg.base_lr, cfg.max_lr, step) for i in range(4 * iters)]
    assert [r["lr"] for r in hist.rows] == hist.lr_trace[::iters]
    assert 1 <= len(pool) <= cfg.snapshots_kept
    best = max(r["val_iou"] for r in hist.rows)
    assert TR.mean_iou(m, tiny_data[6:], *D.depth_range(tiny_data[:6]), 4) == best


def test_phase_loss_weights(tiny_data, monkeypatch):
    seen = []
    real = TR.combined_loss

    def spy(logits, y, w_bce, w_lovasz):
        seen.append((w_bce, w_lovasz))
        return real(logits, y, w_bce, w_lovasz)

    monkeypatch.setattr(TR, "combined_loss", spy)
    TR.train_fold(build_model(tiny_model_config(), 1), tiny_data[:4], tiny_data[4:], quick_config())
    assert seen == [(1.0, 0.0)] * 2 + [(0.1, 0.9)] * 2


def test_early_stopping(tiny_data):
    cfg = quick_config(phase1_epochs=0, max_epochs=None, early_stop_patience=2, base_lr=1e-9, max_lr=1e-9)
    _, _, hist = TR.train_fold(build_model(tiny_model_config(), 1), tiny_data[:4], tiny_data[4:], cfg)
    ious = [r["val_iou"] for r in hist.rows]
    best_at = int(np.argmax(ious))
    assert len(ious) == best_at + 1 + 2


def test_train_fold_nan(tiny_data):
    m = build_model(tiny_model_config(), 1)
    m.params["final.bias"].data[...] = np.nan
    with pytest.raises(NumericError, match="epoch 1"):
        TR.train_fold(m, tiny_data[:4], tiny_data[4:], quick_config())


def test_train_fold_preconditions(tiny_data):
    with pytest.raises(ValueError):
        TR.train_fold(build_model(tiny_model_config()), [], tiny_data, quick_config())
    with pytest.raises(ConfigurationError, match="base_lr"):
        TR.train_fold(build_model(tiny_model_config()), tiny_data, tiny_data, quick_config(base_lr=1.0))


def test_train_kfold_artifacts_and_determinism(tiny_data, tmp_path):
    cfg = quick_config(max_epochs=2, phase1_epochs=1)

    def run(out):
        arts = TR.train_kfold(tiny_data, 2, cfg, tiny_model_config(), out)
        return arts, {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}

    arts, files = run(tmp_path / "a")
    _, again = run(tmp_path / "b")
    assert files == again
    names = {str(p) for p in files}
    assert {"fold0.w", "fold1.w", "fold0.ens.w", "fold1.ens.w", "history.csv"} <= names
    vals = sorted(i for a in arts for i in a.val_ids)
    assert vals == sorted(s.id for s in tiny_data)
    lines = files[next(p for p in files if str(p) == "history.csv")].decode().splitlines()
    assert lines[0] == "fold,epoch,phase,lr,train_loss,val_iou,snapshotted" and len(lines) == 5
    model, meta = load_checkpoint(tmp_path / "a" / "fold1.ens.w")
    assert meta["fold"] == 1 and meta["seed"] == 1 and meta["d_max"] > meta["d_min"]
    for snap_file in arts[0].snapshot_dir.glob("snap_*.w"):
        assert set(read_weights(snap_file)) == set(model.state_dict())


def test_train_kfold_error_carries_fold(tiny_data, tmp_path):
    bad = [D.ImageSample(s.id, s.image, s.mask, s.depth) for s in tiny_data]
    bad[0] = D.ImageSample(bad[0].id, np.zeros((12, 12)), np.zeros((12, 12), np.uint8), 1.0)
    with pytest.raises(DimensionError, match="fold"):
        TR.train_kfold(bad, 2, quick_config(), tiny_model_config(), tmp_path)
