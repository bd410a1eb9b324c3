import json
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdlab.baselines import (
    NcConfig,
    blur_detect,
    blur_evaluate,
    blur_image,
    early_defense_points,
    fp_prune,
    fp_sweep,
    mad_anomaly_index,
    nc_detect,
    nc_reverse_engineer,
    prune_order,
)
from bdlab.baselines.fineprune import PruneCurve
from bdlab.data import clean_detection_set, split, synth_dataset
from bdlab.model import build_cnn, clean_accuracy, train


# -- MAD --------------------------------------------------------------------------------------

def _mad_oracle(values):
    med = statistics.median(values)
    dev = [abs(v - med) for v in values]
    mad = statistics.median(dev)
    return [d / (1.4826 * mad) for d in dev]


def test_mad_matches_brute_force_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(3, 30))
        v = rng.normal(size=n) * rng.uniform(0.1, 100)
        assert mad_anomaly_index(v) == _mad_oracle(v.tolist())


def test_mad_worked_example():
    idx = mad_anomaly_index([2, 4, 4, 4, 5, 5, 5, 7, 9])
    assert idx[-1] == pytest.approx(4 / 1.4826)
    assert idx[-1] == pytest.approx(2.698, abs=1e-3)


def test_mad_degenerate_and_short():
    with pytest.raises(ValueError, match="degenerate"):
        mad_anomaly_index([3.0, 3.0, 3.0, 3.0])
    with pytest.raises(ValueError):
        mad_anomaly_index([1.0, 2.0])


@given(st.floats(0.1, 50), st.floats(-100, 100))
def test_mad_symmetric_pair_equal(d, c):
    idx = mad_anomaly_index([c - d, c, c + d])
    assert idx[0] == pytest.approx(idx[2]) and idx[1] == 0.0


def test_nc_config_validation():
    with pytest.raises(ValueError):
        NcConfig(lam=-0.1)
    with pytest.raises(ValueError):
        NcConfig(phi=0.0)
    with pytest.raises(ValueError):
        NcConfig(phi=1.2)
    with pytest.raises(ValueError):
        NcConfig(batch=0)


# -- trained toy model shared by NC and FP tests -----------------------------------------------

@pytest.fixture(scope="module")
def toy():
    ds = synth_dataset(3, (16, 16, 3), 60, seed=5)
    tr, te = split(ds, 1 / 3, seed=5)
    m, _ = train(build_cnn("tiny", (16, 16, 3), 3, seed=0), tr, batch=16, epochs=15, seed=0)
    return m, te


def test_nc_outputs_in_box(toy):
    m, te = toy
    cs = clean_detection_set(m, te, 8, seed=0)
    imgs = np.concatenate([cs[0], cs[2]])
    r = nc_reverse_engineer(m, imgs, 1, NcConfig(lam=0.01, epochs=20, batch=16))
    assert r.mask.shape == (16, 16) and r.pattern.shape == (16, 16, 3)
    assert r.mask.min() >= 0 and r.mask.max() <= 1
    assert r.pattern.min() >= 0 and r.pattern.max() <= 1
    assert r.l1 == pytest.approx(r.mask.sum())
    assert 0 <= r.achieved <= 1


def test_nc_deterministic(toy):
    m, te = toy
    cs = clean_detection_set(m, te, 5, seed=0)
    imgs = np.concatenate([cs[1], cs[2]])
    cfg = NcConfig(lam=0.05, epochs=5, batch=4, seed=3)
    a = nc_reverse_engineer(m, imgs, 0, cfg)
    b = nc_reverse_engineer(m, imgs, 0, cfg)
    assert np.array_equal(a.mask, b.mask) and a.l1 == b.l1


def test_nc_penalty_monotone(toy):
    m, te = toy
    cs = clean_detection_set(m, te, 8, seed=0)
    imgs = np.concatenate([cs[0], cs[1]])
    l1 = [nc_reverse_engineer(m, imgs, 2, NcConfig(lam=lam, epochs=30, batch=16)).l1 for lam in (0.05, 0.1, 0.5)]
    inversions = sum(b > a for a, b in zip(l1, l1[1:]))
    assert inversions <= 1, l1


def test_nc_zero_penalty_grows_mask(toy):
    m, te = toy
    cs = clean_detection_set(m, te, 8, seed=0)
    imgs = np.concatenate([cs[0], cs[1]])
    free = nc_reverse_engineer(m, imgs, 2, NcConfig(lam=0.0, epochs=30, batch=16))
    tight = nc_reverse_engineer(m, imgs, 2, NcConfig(lam=0.5, epochs=30, batch=16))
    assert free.l1 > tight.l1
    assert free.achieved >= tight.achieved


def test_nc_detect_structure(toy):
    m, te = toy
    cs = clean_detection_set(m, te, 6, seed=0)
    r = nc_detect(m, cs, NcConfig(lam=0.01, epochs=10, batch=16))
    assert sorted(r.anomaly_index) == [0, 1, 2]
    assert all(v is None or v >= 0 for v in r.anomaly_index.values())
    d = json.loads(r.to_json())
    assert d["decision"] in ("attacked", "clean")
    assert len(d["per_target"]) == 3
    # a class excluded for missing phi never carries an index
    for t in r.targets:
        if t.achieved < 0.9:
            assert r.anomaly_index[t.target] is None


def test_nc_empty_images(toy):
    m, _ = toy
    with pytest.raises(ValueError):
        nc_reverse_engineer(m, np.zeros((0, 16, 16, 3)), 0, NcConfig())


# -- fine-pruning -------------------------------------------------------------------------------

def test_prune_k0_unchanged(toy):
    m, te = toy
    p = fp_prune(m, te.images, 0)
    assert np.array_equal(p.logits_array(te.images), m.logits_array(te.images))


def test_prune_k_range(toy):
    m, te = toy
    for k in (-1, m.penultimate_width):
        with pytest.raises(ValueError):
            fp_prune(m, te.images, k)


def test_prune_order_is_sorted_permutation(toy):
    m, te = toy
    order = prune_order(m, te.images)
    means = m.penultimate_activations(te.images).mean(axis=0)
    assert sorted(order.tolist()) == list(range(m.penultimate_width))
    assert np.all(np.diff(means[order]) >= 0)
    # ties (dead neurons) keep ascending index order
    ties = order[means[order] == means[order][0]]
    assert np.all(np.diff(ties) > 0)


@pytest.mark.parametrize("k", [1, 7, 40, 63])
def test_prune_zeroes_exactly_k(toy, k):
    m, te = toy
    p = fp_prune(m, te.images, k)
    probe = np.random.default_rng(k).uniform(0, 1, (30, 16, 16, 3))
    acts = p.penultimate_activations(np.concatenate([te.images, probe]))
    silenced = np.flatnonzero(p.prune_mask == 0)
    assert len(silenced) == k
    assert np.all(acts[:, silenced] == 0)
    assert m.prune_mask.all()  # original untouched


def test_sweep_matches_pruned_models(toy):
    m, te = toy
    bd = te.subset(te.indices_of(0))
    curve = fp_sweep(m, te, bd, target=1, stride=9)
    assert curve.pruned == list(range(0, 64, 9))
    assert curve.accuracy[0] == clean_accuracy(m, te)
    order = np.asarray(curve.order)
    for k, acc, asr in curve.rows():
        p = fp_prune(m, te.images, k, order)
        assert acc == clean_accuracy(p, te)
        assert asr == float(np.mean(p.predict_labels(bd.images) == 1))
    assert all(0 <= v <= 1 for v in curve.accuracy + curve.attack_success)
    assert json.loads(curve.to_json())["pruned"] == curve.pruned


def test_sweep_empty_sets(toy):
    m, te = toy
    empty = te.subset([])
    with pytest.raises(ValueError):
        fp_sweep(m, te, empty, 1)


def test_early_defense_points():
    curve = PruneCurve([0, 1, 2, 3], [0.9, 0.88, 0.80, 0.5], [1.0, 0.6, 0.4, 0.1])
    assert early_defense_points(curve) == []
    curve = PruneCurve([0, 1, 2], [0.9, 0.89, 0.86], [1.0, 0.45, 0.2])
    assert early_defense_points(curve) == [1, 2]


# -- blurring -----------------------------------------------------------------------------------

@pytest.mark.parametrize("filt", ["average", "median"])
@pytest.mark.parametrize("size", [2, 3, 5])
def test_blur_constant_image_unchanged(filt, size):
    img = np.full((10, 10, 3), 0.37)
    np.testing.assert_allclose(blur_image(img, filt, size), img, atol=1e-12)


def test_blur_checker_average():
    ch = np.indices((8, 8)).sum(axis=0) % 2
    out = blur_image(ch[..., None].astype(np.float64), "average", 2)
    np.testing.assert_allclose(out[1:-1, 1:-1, 0], 0.5)


def test_blur_matches_explicit_reflect_average():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (7, 9, 2))
    out = blur_image(img, "average", 3)
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="symmetric")
    ref = np.mean([padded[i:i + 7, j:j + 9] for i in range(3) for j in range(3)], axis=0)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_blur_batch_equals_per_image():
    rng = np.random.default_rng(3)
    batch = rng.uniform(0, 1, (4, 8, 8, 3))
    for filt in ("average", "median"):
        np.testing.assert_array_equal(blur_image(batch, filt, 3),
                                      np.stack([blur_image(b, filt, 3) for b in batch]))


def test_blur_errors():
    img = np.zeros((6, 6, 3))
    with pytest.raises(ValueError):
        blur_image(img, "average", 7)
    with pytest.raises(ValueError):
        blur_image(img, "average", 1)
    with pytest.raises(ValueError):
        blur_image(img, "gaussian", 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["average", "median"]), st.integers(2, 6))
def test_blur_stays_in_range(seed, filt, size):
    img = np.random.default_rng(seed).uniform(0, 1, (8, 8, 3))
    out = blur_image(img, filt, size)
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


class _ByMean:
    """Label 1 when the image mean exceeds a cut, so blurring never changes it unless pixels clip."""

    def __init__(self, cut):
        self.cut = cut

    def predict_labels(self, images):
        return (images.reshape(len(images), -1).mean(axis=1) > self.cut).astype(int)


class _ByCorner:
    """Looks only at pixel (0, 0); a 3x3 blur dilutes an isolated bright corner below the cut."""

    def predict_labels(self, images):
        return (images[:, 0, 0, 0] > 0.9).astype(int)


def test_blur_detect_flags():
    flat = np.full((6, 6, 1), 0.3)
    assert not blur_detect(_ByMean(0.5), flat)
    spike = np.zeros((6, 6, 1))
    spike[0, 0] = 1.0
    assert blur_detect(_ByCorner(), spike, "average", 3)


def test_blur_rates_recomputable_from_rows():
    rng = np.random.default_rng(4)
    clean = rng.uniform(0, 0.5, (10, 6, 6, 1))
    bd = clean.copy()
    bd[:6, 0, 0] = 1.0
    rep = blur_evaluate(_ByCorner(), clean, np.zeros(10, int), bd, np.zeros(10, int), "average", 3)
    assert rep.fpr == 0.0 and rep.tpr == 0.6
    lines = rep.to_csv().strip().split("\n")
    assert lines[0] == "set,id,clean_label,pred,pred_blurred,flag"
    flags = [int(l.split(",")[-1]) for l in lines[1:] if l.startswith("backdoor")]
    assert np.mean(flags) == rep.tpr
    assert rep.to_dict()["n_clean"] == 10
