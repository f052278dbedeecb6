import math
import os

import numpy as np
import pytest

from multinex.checkpoint import load_checkpoint
from multinex.image_io import save_image
from multinex.losses import loss_hybrid
from multinex.nn import VariantConfig, init_params
from multinex.train import (AdamState, DatasetLayoutError, PairedDataset, TrainConfig, TrainingDiverged,
                            adam_step, augment_pair, cosine_lr, format_trace, sample_batch, train)


def pairs(n=2, size=24, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        gt = rng.uniform(size=(size, size, 3)).astype(np.float32)
        out.append(((0.2 * gt).astype(np.float32), gt))
    return out


def test_cosine_schedule():
    cfg = TrainConfig(iterations=1000)
    assert cosine_lr(0, cfg) == pytest.approx(2e-4, abs=1e-18)
    assert cosine_lr(1000, cfg) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_lr(500, cfg) == pytest.approx(1.005e-4, abs=1e-15)
    lrs = [cosine_lr(t, cfg) for t in range(1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-6, lr_end=1e-6)
    with pytest.raises(ValueError):
        TrainConfig(w_msssim=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


def test_adam_first_step_closed_form():
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.01)
    assert p["w"][0] == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    ref = {k: v.copy() for k, v in p.items()}
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v2 = {k: np.zeros_like(v) for k, v in p.items()}
    state = AdamState()
    for t in range(1, 6):
        g = {k: rng.normal(size=v.shape) for k, v in p.items()}
        lr = 1e-2 / t
        adam_step(p, g, state, lr)
        for k in ref:
            m[k] = 0.9 * m[k] + 0.1 * g[k]
            v2[k] = 0.999 * v2[k] + 0.001 * g[k] ** 2
            mhat = m[k] / (1 - 0.9 ** t)
            vhat = v2[k] / (1 - 0.999 ** t)
            ref[k] = ref[k] - lr * mhat / (np.sqrt(vhat) + 1e-8)
    for k in ref:
        np.testing.assert_allclose(p[k], ref[k], rtol=1e-12, atol=1e-14)
    assert state.t == 5


def test_adam_zero_gradient_and_keys():
    p = {"w": np.array([1.0, 2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert p["w"].tolist() == [1.0, 2.0] and state.t == 1
    with pytest.raises(KeyError):
        adam_step(p, {"v": np.zeros(2)}, state, lr=0.1)


def test_augmentation_disabled_is_top_left():
    ds = PairedDataset.from_arrays(pairs(1, size=20))
    cfg = TrainConfig(batch=2, patch=8, random_crop=False, flip=False, rotate=False)
    low, gt = sample_batch(ds, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(gt[0], ds[0][1][:8, :8])
    np.testing.assert_array_equal(low[1], ds[0][0][:8, :8])


def test_flip_involution(rng):
    a = rng.uniform(size=(6, 6, 3))
    once = augment_pair(a, a, 0, 0, 6, True, True, 0)[0]
    twice = augment_pair(once, once, 0, 0, 6, True, True, 0)[0]
    np.testing.assert_array_equal(twice, a)
    np.testing.assert_array_equal(augment_pair(a, a, 0, 0, 6, False, False, 4 % 4)[0], a)


def test_pair_members_transformed_identically():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    ds = PairedDataset.from_arrays([(img, img * 1)])
    low, gt = sample_batch(ds, TrainConfig(batch=16, patch=8), np.random.default_rng(1))
    np.testing.assert_array_equal(low, gt)
    # every patch is a dihedral transform of some crop
    for patch in gt:
        found = False
        for top in range(9):
            for left in range(9):
                crop = img[top:top + 8, left:left + 8]
                cands = [np.rot90(c, k, axes=(0, 1)) for c in (crop, crop[:, ::-1]) for k in range(4)]
                found |= any(np.array_equal(patch, c) for c in cands)
        assert found


def test_sampling_deterministic():
    ds = PairedDataset.from_arrays(pairs(3))
    cfg = TrainConfig(batch=4, patch=12)
    a = sample_batch(ds, cfg, np.random.default_rng(5))
    b = sample_batch(ds, cfg, np.random.default_rng(5))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_patch_too_large():
    ds = PairedDataset.from_arrays(pairs(1, size=10))
    with pytest.raises(ValueError, match="patch"):
        sample_batch(ds, TrainConfig(patch=12), np.random.default_rng(0))


def _write(root, names_low, names_high, size=(12, 12)):
    for sub, names in (("low", names_low), ("high", names_high)):
        for n in names:
            save_image(np.zeros(size + (3,)), os.path.join(root, sub, n))


def test_dataset_from_root(tmp_path):
    _write(tmp_path, ["b.png", "a.png"], ["a.png", "b.png"])
    ds = PairedDataset.from_root(tmp_path)
    assert [os.path.basename(p[0]) for p in ds.pairs] == ["a.png", "b.png"]
    low, gt = ds[1]
    assert low.shape == gt.shape == (12, 12, 3)


def test_dataset_unmatched_file(tmp_path):
    _write(tmp_path, ["a.png", "c.png"], ["a.png", "b.png"])
    with pytest.raises(DatasetLayoutError, match="c.png"):
        PairedDataset.from_root(tmp_path)


def test_dataset_missing_dir_and_empty(tmp_path):
    with pytest.raises(DatasetLayoutError, match="missing"):
        PairedDataset.from_root(tmp_path)
    os.makedirs(tmp_path / "low")
    os.makedirs(tmp_path / "high")
    with pytest.raises(DatasetLayoutError, match="empty"):
        PairedDataset.from_root(tmp_path)


def test_dataset_size_mismatch(tmp_path):
    save_image(np.zeros((8, 8, 3)), tmp_path / "low" / "a.png")
    save_image(np.zeros((8, 9, 3)), tmp_path / "high" / "a.png")
    ds = PairedDataset.from_root(tmp_path)
    with pytest.raises(DatasetLayoutError, match="differ"):
        ds[0]


def small_cfg(**kw):
    base = dict(iterations=6, batch=2, patch=22, lr_start=1e-3, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_seeded_traces_identical(tmp_path):
    ds = PairedDataset.from_arrays(pairs(3))
    a = train(ds, VariantConfig.nano(), small_cfg(), out_dir=tmp_path / "a")
    b = train(ds, VariantConfig.nano(), small_cfg(), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    assert a.trace_csv() == b.trace_csv()
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()
    c = train(ds, VariantConfig.nano(), small_cfg(seed=1))
    assert c.trace_csv() != a.trace_csv()


def test_trace_format(tmp_path):
    ds = PairedDataset.from_arrays(pairs(1))
    res = train(ds, VariantConfig.nano(), small_cfg(iterations=3, checkpoint_every=2), out_dir=tmp_path)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iter,lr,total,mse,msssim,perc"
    assert len(lines) == 4
    assert os.path.exists(tmp_path / "checkpoints" / "iter_0000002.mnx")
    final = load_checkpoint(tmp_path / "final.mnx", expect=VariantConfig.nano())
    for name in res.params:
        assert final[name].tobytes() == res.params[name].tobytes()
    assert format_trace(res.trace, every=2).count("\n") == 3  # header, iter 0, iter 2


def test_first_loss_is_identity_loss():
    ds = PairedDataset.from_arrays(pairs(1))
    cfg = small_cfg(iterations=1, batch=1, random_crop=False, flip=False, rotate=False, patch=24)
    res = train(ds, VariantConfig.lightweight(), cfg)
    low, gt = ds[0]
    want = loss_hybrid(low[None], gt[None])
    assert res.trace[0][2] == pytest.approx(float(want.total), rel=1e-6)


def test_zero_weights_leave_params_unchanged():
    ds = PairedDataset.from_arrays(pairs(1))
    cfg = small_cfg(w_mse=0.0, w_msssim=0.0, w_perc=0.0)
    res = train(ds, VariantConfig.nano(), cfg)
    init = init_params(VariantConfig.nano(), seed=cfg.seed)
    assert all(row[2] == 0.0 for row in res.trace)
    for name in init:
        assert res.params[name].tobytes() == init[name].tobytes()


def test_divergence_reports_iteration():
    low, gt = pairs(1)[0]
    low = low.copy()
    low[0, 0, 0] = np.nan
    ds = PairedDataset.from_arrays([(low, gt)])
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train(ds, VariantConfig.nano(), small_cfg(random_crop=False, patch=24))


def test_zero_iterations_writes_init(tmp_path):
    ds = PairedDataset.from_arrays(pairs(1))
    res = train(ds, VariantConfig.nano(), small_cfg(iterations=0), out_dir=tmp_path)
    assert res.trace == []
    init = init_params(VariantConfig.nano(), seed=0)
    final = load_checkpoint(tmp_path / "final.mnx")
    assert all(final[n].tobytes() == init[n].tobytes() for n in init)


def test_loss_decreases_over_single_image_run():
    ds = PairedDataset.from_arrays(pairs(1, size=32))
    cfg = TrainConfig(iterations=2000, batch=1, patch=32, lr_start=5e-3, log_every=0,
                      random_crop=False, flip=False, rotate=False)
    trace = train(ds, VariantConfig.nano(), cfg).trace
    k = len(trace) // 10
    first = np.median([r[2] for r in trace[:k]])
    last = np.median([r[2] for r in trace[-k:]])
    assert last < first
    assert all(math.isfinite(r[2]) for r in trace)
