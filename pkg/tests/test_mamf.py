import json
import warnings

import numpy as np
import pytest

from bdlab import grad as G
from bdlab.data import CleanDetectionSets
from bdlab.grad import Tensor
from bdlab.mamf import (
    DetectionConfig,
    MamfResult,
    estimate_pattern,
    infer,
    make_support_mask,
    mamf,
    reduce_grid,
    scan,
    support_widths,
)
from bdlab.model import ClassifierModel, Layer, _init_params, build_cnn
from bdlab.poison import PlacementError, embed_perceptible
from bdlab.receptive import LocalForward


# -- widths and masks ---------------------------------------------------------------------

@pytest.mark.parametrize("W,lo,hi,expected", [
    (32, 0.15, 0.2, [5, 6]),
    (32, 0.08, 0.22, [3, 4, 5, 6, 7]),
    (24, 0.08, 0.22, [2, 3, 4, 5]),
    (20, 0.15, 0.15, [3]),
])
def test_support_widths(W, lo, hi, expected):
    assert support_widths(W, lo, hi) == expected


def test_support_widths_subsample_keeps_endpoints():
    ws = support_widths(100, 0.1, 0.5, max_width_count=5)
    assert ws[0] == 10 and ws[-1] == 50 and len(ws) == 5
    assert ws == sorted(ws)


def test_support_widths_empty_range():
    with pytest.raises(ValueError):
        support_widths(10, 0.11, 0.19)


def test_config_validation():
    for bad in (dict(r_min=0.3, r_max=0.2), dict(r_min=0.0), dict(r_max=1.0), dict(pi=0.0), dict(pi=1.2)):
        with pytest.raises(ValueError):
            DetectionConfig(**bad)


def test_mask_top_left_and_bottom_right():
    m = make_support_mask(24, 24, 3, "top-left")
    assert m.bits.sum() == 9 and m.bits[:3, :3].all()
    m = make_support_mask(24, 24, 5, "bottom-right")
    assert m.bits.sum() == 25 and m.bits[19:24, 19:24].all()


@pytest.mark.parametrize("w", [1, 2, 5, 8])
def test_mask_sum(w):
    for anchor in ("top-left", "top-right", "bottom-left", "bottom-right", (3, 4)):
        assert make_support_mask(16, 16, w, anchor).bits.sum() == w * w


def test_mask_out_of_bounds():
    with pytest.raises(PlacementError):
        make_support_mask(16, 16, 5, (14, 0))


def test_mask_locality():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (24, 24, 3)).astype(np.float32)
    v = rng.uniform(0, 1, (24, 24, 3)).astype(np.float32)
    for anchor in ("top-left", "bottom-right", (7, 9)):
        m = make_support_mask(24, 24, 4, anchor)
        out = embed_perceptible(x, v, m)
        off = ~m.bits.astype(bool)
        assert np.array_equal(out[off], x[off])


# -- toy models ---------------------------------------------------------------------------

def one_pixel_model(gain=5.0, bias=0.0, shape=(6, 6, 1)):
    """Logit of class 1 is ``gain * x[0, 0, 0] + bias``; class 0 has logit 0.

    Only pixel (0, 0) of channel 0 matters, and p_1 increases with its brightness.
    """
    n = int(np.prod(shape))
    layers = [Layer("flatten"), Layer("dense", (n, 2)), Layer("relu"), Layer("dense", (2, 2))]
    p = _init_params(layers, 0)
    p = {k: np.zeros_like(v, dtype=np.float64) for k, v in p.items()}
    p["dense1.w"][0, 0] = 1.0
    p["dense3.w"][0, 1] = gain
    p["dense3.b"][1] = bias
    return ClassifierModel(layers, p, shape, 2)


def test_one_pixel_toy_saturates_at_one():
    model = one_pixel_model()
    images = np.random.default_rng(0).uniform(0, 0.3, (20, 6, 6, 1))
    est = estimate_pattern(model, images, 1, make_support_mask(6, 6, 2, "top-left"), epochs=20, seed=0)
    assert est.pattern[0, 0, 0] == 1.0
    assert est.objective_end > est.objective_start


def test_flat_objective_keeps_initialisation():
    model = one_pixel_model()
    images = np.random.default_rng(0).uniform(0, 1, (10, 6, 6, 1))
    # the support never touches pixel (0, 0): the posterior ignores it
    est = estimate_pattern(model, images, 1, make_support_mask(6, 6, 3, "bottom-right"), epochs=10, seed=0)
    assert np.all(est.pattern == 0.5)
    assert est.objective_end == est.objective_start


def test_mamf_counting():
    model = one_pixel_model(gain=10.0, bias=-5.0)       # class 1 iff pixel > 0.5
    images = np.zeros((50, 6, 6, 1))
    images[:37, 0, 0, 0] = 0.9
    images[37:, 0, 0, 0] = 0.1
    mask = make_support_mask(6, 6, 2, "bottom-right")
    assert mamf(model, images, np.zeros((2, 2, 1)), mask, 1) == 0.74


def test_mamf_constant_target_and_no_flip():
    model = one_pixel_model(gain=0.0, bias=3.0)         # always class 1
    images = np.zeros((8, 6, 6, 1))
    mask = make_support_mask(6, 6, 2)
    assert mamf(model, images, np.zeros((2, 2, 1)), mask, 1) == 1.0
    assert mamf(model, images, np.zeros((2, 2, 1)), mask, 0) == 0.0
    with pytest.raises(ValueError):
        mamf(model, images[:0], np.zeros((2, 2, 1)), mask, 1)


def test_estimate_rejects_empty_set():
    with pytest.raises(ValueError):
        estimate_pattern(one_pixel_model(), np.zeros((0, 6, 6, 1)), 1, make_support_mask(6, 6, 2))


def test_estimate_never_touches_weights():
    model = build_cnn("tiny", (12, 12, 3), 3, seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    images = np.random.default_rng(0).uniform(0, 1, (6, 12, 12, 3)).astype(np.float32)
    estimate_pattern(model, images, 2, make_support_mask(12, 12, 3), epochs=3, seed=0)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objective_never_decreases(seed):
    model = build_cnn("tiny", (12, 12, 3), 3, seed=seed)
    images = np.random.default_rng(seed).uniform(0, 1, (12, 12, 12, 3)).astype(np.float32)
    est = estimate_pattern(model, images, 1, make_support_mask(12, 12, 3, "bottom-left"), epochs=15, batch=4,
                           seed=seed)
    assert est.objective_end >= est.objective_start - 1e-6
    assert est.pattern.min() >= 0 and est.pattern.max() <= 1 and est.pattern.shape == (3, 3, 3)


def test_early_stop_stops_on_full_flip():
    model = one_pixel_model(gain=10.0, bias=-5.0)
    images = np.zeros((5, 6, 6, 1))
    est = estimate_pattern(model, images, 1, make_support_mask(6, 6, 2), epochs=100, seed=0, early_stop=True)
    assert est.epochs_run < 100
    assert mamf(model, images, est.pattern, make_support_mask(6, 6, 2), 1) == 1.0


# -- local forward --------------------------------------------------------------------------

@pytest.mark.parametrize("block", [((0, 2), (0, 2)), ((14, 16), (13, 16)), ((5, 9), (6, 8)), ((0, 16), (0, 16))])
def test_local_forward_matches_full(block):
    model = build_cnn("tiny", (16, 16, 3), 4, seed=1).astype(np.float64)
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (6, 16, 16, 3))
    v = rng.uniform(0, 1, (16, 16, 3))
    m = np.zeros((16, 16, 1))
    m[block[0][0]:block[0][1], block[1][0]:block[1][1]] = 1

    vf = Tensor(v, requires_grad=True)
    full = model.logits(G.blend(Tensor(x), vf, Tensor(m)))
    G.tsum(G.softmax(full)[:, 2]).backward()

    local = LocalForward(model, x, block)
    (ra, rb), (ca, cb) = local.window
    vl = Tensor(v[ra:rb, ca:cb], requires_grad=True)
    out = local(G.blend(Tensor(local.clean_window), vl, Tensor(m[ra:rb, ca:cb])))
    G.tsum(G.softmax(out)[:, 2]).backward()

    np.testing.assert_allclose(out.data, full.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(vl.grad, vf.grad[ra:rb, ca:cb], rtol=0, atol=1e-12)
    # nothing outside the window receives gradient
    outside = np.ones((16, 16), bool)
    outside[ra:rb, ca:cb] = False
    assert np.all(vf.grad[outside] == 0)


def test_local_forward_valid_padding_and_invisible_rows():
    layers = [Layer("conv", (3, 1, 2), "valid"), Layer("relu"), Layer("pool"), Layer("flatten"),
              Layer("dense", (2 * 3 * 3, 4)), Layer("relu"), Layer("dense", (4, 2))]
    model = ClassifierModel(layers, {k: v.astype(np.float64) for k, v in _init_params(layers, 3).items()},
                            (9, 9, 1), 2)
    x = np.random.default_rng(0).uniform(0, 1, (3, 9, 9, 1))
    # 9 -> 7 after the valid conv -> 3 after pooling: conv row 6 (input rows 6..8) is dropped
    invisible = LocalForward(model, x, ((8, 9), (0, 2)))
    assert invisible.empty
    np.testing.assert_array_equal(invisible(Tensor(x[:, 8:9, 0:2])).data, model.logits(x).data)
    local = LocalForward(model, x, ((2, 4), (3, 5)))
    (ra, rb), (ca, cb) = local.window
    y = x.copy()
    y[:, 2:4, 3:5] = 0.7
    np.testing.assert_allclose(local(Tensor(y[:, ra:rb, ca:cb])).data, model.logits(y).data, atol=1e-12)


# -- reduction, inference, scan --------------------------------------------------------------

def _grid(k, L, rng):
    rho = rng.integers(0, 11, size=(k, k, L)) / 10
    for s in range(k):
        rho[s, s] = np.nan
    return rho


def test_reduce_grid_by_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rho = _grid(4, 3, rng)
        rho_bar, star, pair, tie = reduce_grid(rho)
        pairs = [(s, t) for s in range(4) for t in range(4) if s != t]
        means = {p: sum(rho[p[0], p[1]]) / 3 for p in pairs}
        best = max(means.values())
        winners = [p for p in pairs if np.isclose(means[p], best, rtol=0, atol=1e-12)]
        assert np.isclose(star, best)
        assert pair == winners[0]
        assert tie == (len([p for p in pairs if rho_bar[p] == star]) > 1)


def test_tie_flag_and_lexicographic_winner():
    rho = np.zeros((3, 3, 2))
    for s in range(3):
        rho[s, s] = np.nan
    rho[2, 0] = [0.5, 0.5]
    rho[1, 2] = [0.4, 0.6]
    _, star, pair, tie = reduce_grid(rho)
    assert star == 0.5 and pair == (1, 2) and tie


def _result(star):
    rho = np.full((2, 2, 1), np.nan)
    rho[0, 1] = star
    rho[1, 0] = 0.0
    rho_bar, s, pair, tie = reduce_grid(rho)
    return MamfResult(2, [3], rho, rho_bar, s, pair, tie, s > 0.7, 0.7)


def test_infer():
    d = infer(_result(0.95), 0.7)
    assert d.attacked and d.pair == (0, 1) and str(d) == "attacked(source=0, target=1)"
    d = infer(_result(0.35), 0.7)
    assert not d.attacked and d.pair is None and str(d) == "clean"
    assert not infer(_result(0.7), 0.7).attacked


@pytest.fixture(scope="module")
def toy_scan():
    model = build_cnn("tiny", (16, 16, 3), 3, seed=0)
    rng = np.random.default_rng(0)
    sets = CleanDetectionSets({c: rng.uniform(0, 1, (12, 16, 16, 3)).astype(np.float32) for c in range(3)}, 12)
    cfg = DetectionConfig(r_min=0.1, r_max=0.2, epochs=4, batch=8, seed=3)
    calls = []
    res = scan(model, sets, cfg, progress=lambda *a: calls.append(a))
    return model, sets, cfg, res, calls


def test_scan_solves_every_problem(toy_scan):
    _, _, _, res, calls = toy_scan
    assert res.widths == [2, 3]
    assert len(calls) == 3 * 2 * 2
    assert len(res.patterns) == 12 and all(p.shape[:2] == (k[2], k[2]) for k, p in res.patterns.items())


def test_scan_rho_bounds_and_reductions(toy_scan):
    _, _, _, res, _ = toy_scan
    off = ~np.isnan(res.rho)
    assert off.sum() == 12 and np.all((res.rho[off] >= 0) & (res.rho[off] <= 1))
    assert all(np.isnan(res.rho[s, s]).all() for s in range(3))
    rho_bar, star, pair, tie = reduce_grid(res.rho)
    np.testing.assert_array_equal(rho_bar, res.rho_bar)
    assert (star, pair, tie) == (res.rho_star, res.argmax_pair, res.tie)
    assert res.decision == (res.rho_star > res.pi)


def test_scan_deterministic_and_parallel_identical(toy_scan):
    model, sets, cfg, res, _ = toy_scan
    again = scan(model, sets, cfg, keep_patterns=False)
    np.testing.assert_array_equal(again.rho, res.rho)
    pooled = scan(model, sets, cfg, keep_patterns=False, workers=2)
    np.testing.assert_array_equal(pooled.rho, res.rho)


def test_result_json_round_trip(toy_scan):
    _, _, _, res, _ = toy_scan
    d = json.loads(res.to_json())
    assert d["decision"] in ("attacked", "clean") and len(d["rho"]) == 3
    back = MamfResult.from_dict(d)
    np.testing.assert_array_equal(back.rho, res.rho)
    assert back.rho_star == res.rho_star and back.argmax_pair == res.argmax_pair
    assert back.curve() == res.curve()


def test_small_clean_set_warns():
    model = build_cnn("tiny", (12, 12, 1), 3, seed=0)
    sets = CleanDetectionSets({c: np.zeros((3, 12, 12, 1), np.float32) for c in range(3)}, 3)
    cfg = DetectionConfig(r_min=0.25, r_max=0.25, epochs=1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = scan(model, sets, cfg)
    assert any("threshold" in str(w.message) for w in caught)
    assert res.warnings


def test_scan_class_count_mismatch():
    model = build_cnn("tiny", (12, 12, 1), 3, seed=0)
    sets = CleanDetectionSets({c: np.zeros((3, 12, 12, 1), np.float32) for c in range(2)}, 3)
    with pytest.raises(ValueError):
        scan(model, sets, DetectionConfig())


def test_scan_error_names_pair():
    model = build_cnn("tiny", (12, 12, 1), 3, seed=0)
    sets = CleanDetectionSets({0: np.zeros((3, 12, 12, 1), np.float32), 1: np.zeros((0, 12, 12, 1), np.float32),
                               2: np.zeros((3, 12, 12, 1), np.float32)}, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError, match=r"pair \(s=1"):
            scan(model, sets, DetectionConfig(r_min=0.25, r_max=0.25, epochs=1))
