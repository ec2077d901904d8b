import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from misure import FunctionAdapter, RiseConfig, SgcConfig, get_adapter
from misure.baselines import (
    generate_rise_masks,
    grad_cam_map,
    minmax_normalize,
    occlusion_saliency,
    rise_from_masks,
    rise_saliency,
    seg_grad_cam,
    threshold_saliency,
)
from misure.exceptions import CapabilityError, ClassAbsentError
from misure.masks import resize_matrix

H = W = 16


def two_class(fg):
    fg = np.asarray(fg, dtype=float)
    return np.stack([1 - fg, fg])


def object_scene():
    x0 = np.full((1, H, W), 0.4)
    obj = np.zeros((H, W), bool)
    obj[5:11, 5:11] = True
    x0[0, obj] = 0.9
    return x0, obj


def keyed_stub(obj, key):
    """Predicts the full object only when pixel ``key`` is intact, else half of it."""
    half = obj.copy()
    half[: obj.shape[0] // 2 + 3] = False

    def fwd(x):
        return two_class(obj if x[0][key] > 0 else half)

    return FunctionAdapter(fwd, 2, (1, H, W))


def brute_rise(adapter, x0, label, masks):
    ref = adapter.forward(x0).argmax(0) == label
    s = np.zeros(x0.shape[1:])
    for m in masks:
        pred = adapter.forward(x0 * m[None]).argmax(0) == label
        inter = np.sum(pred & ref)
        w = 2 * inter / (pred.sum() + ref.sum()) if pred.sum() + ref.sum() else 1.0
        s += w * m
    lo, hi = s.min(), s.max()
    return np.zeros_like(s) if hi == lo else (s - lo) / (hi - lo)


# --- normalization and threshold ------------------------------------------


def test_minmax_degenerate_is_zero():
    np.testing.assert_array_equal(minmax_normalize(np.full((3, 3), 4.0)), 0.0)
    out = minmax_normalize(np.array([2.0, 4.0, 3.0]))
    np.testing.assert_allclose(out, [0.0, 1.0, 0.5])


def test_threshold_examples():
    np.testing.assert_array_equal(threshold_saliency(np.array([0.1, 0.3, 0.5]), 0.2), [False, True, True])
    np.testing.assert_array_equal(threshold_saliency(np.array([0.1, 1.0]), 0.0), True)
    np.testing.assert_array_equal(threshold_saliency(np.array([0.1, 1.0]), 1.0), False)
    with pytest.raises(ValueError):
        threshold_saliency(np.zeros(2), 1.5)


@given(arrays(np.float64, 20, elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone(s, t1, t2):
    t1, t2 = min(t1, t2), max(t1, t2)
    hi = threshold_saliency(s, t2)
    lo = threshold_saliency(s, t1)
    assert np.all(lo[hi])


# --- RISE ------------------------------------------------------------------


def test_rise_masks_shape_range_and_determinism():
    cfg = RiseConfig(n_masks=200, seed=3)
    m1 = generate_rise_masks((20, 24), cfg)
    m2 = generate_rise_masks((20, 24), cfg)
    assert m1.shape == (200, 20, 24)
    assert m1.min() >= 0 and m1.max() <= 1
    np.testing.assert_array_equal(m1, m2)
    assert abs(m1.mean() - cfg.keep_prob) < 0.05
    assert not np.array_equal(m1, generate_rise_masks((20, 24), RiseConfig(n_masks=200, seed=4)))


def test_rise_masks_are_shifted_upsampled_grids():
    cfg = RiseConfig(n_masks=5, grid=4, seed=0)
    masks = generate_rise_masks((8, 8), cfg)
    rng = np.random.default_rng(cfg.seed)
    grids = (rng.random((5, 4, 4)) < cfg.keep_prob).astype(float)
    shifts = rng.integers(0, (2, 2), size=(5, 2))
    R = resize_matrix(5, 10)
    for i in range(5):
        big = R @ np.pad(grids[i], ((0, 1), (0, 1)), mode="edge") @ R.T
        dy, dx = shifts[i]
        np.testing.assert_allclose(masks[i], big[dy:dy + 8, dx:dx + 8])


def test_rise_identical_all_ones_masks_give_zero_map():
    x0, obj = object_scene()
    a = FunctionAdapter(lambda x: two_class(obj), 2, (1, H, W))
    np.testing.assert_array_equal(rise_from_masks(a, x0, 1, np.ones((4, H, W))), 0.0)


def test_rise_two_masks_gives_mask_a():
    x0, obj = object_scene()
    key = (2, 2)
    a = keyed_stub(obj, key)
    A = np.zeros((H, W))
    A[:4, :4] = 1.0
    A[6:9, 6:9] = 1.0
    B = np.ones((H, W))
    B[key] = 0.0
    s = rise_from_masks(a, x0, 1, np.stack([A, B]))
    # weights are 1 (A keeps the key pixel) and 0 (B removes it)
    np.testing.assert_allclose(s, A)


def test_rise_matches_brute_force_on_hand_built_masks():
    x0, obj = object_scene()
    a = keyed_stub(obj, (7, 7))
    rng = np.random.default_rng(0)
    masks = (rng.random((8, H, W)) < 0.6).astype(float) * rng.uniform(0.5, 1.0, (8, 1, 1))
    np.testing.assert_allclose(rise_from_masks(a, x0, 1, masks), brute_rise(a, x0, 1, masks), atol=1e-6)


def test_rise_duplicating_mask_set_is_invariant():
    x0, obj = object_scene()
    a = keyed_stub(obj, (7, 7))
    masks = (np.random.default_rng(1).random((6, H, W)) < 0.5).astype(float)
    np.testing.assert_allclose(rise_from_masks(a, x0, 1, masks),
                               rise_from_masks(a, x0, 1, np.concatenate([masks, masks])), atol=1e-12)


def test_rise_saliency_deterministic_and_in_range():
    x0, obj = object_scene()
    a = keyed_stub(obj, (7, 7))
    cfg = RiseConfig(n_masks=64, seed=5, batch_size=10)
    s1 = rise_saliency(a, x0, 1, cfg)
    s2 = rise_saliency(a, x0, 1, cfg)
    np.testing.assert_array_equal(s1, s2)
    assert s1.min() >= 0 and s1.max() <= 1


def test_rise_class_absent():
    x0, obj = object_scene()
    a = FunctionAdapter(lambda x: two_class(np.zeros((H, W))), 2, (1, H, W))
    with pytest.raises(ClassAbsentError):
        rise_saliency(a, x0, 1, RiseConfig(n_masks=4))


# --- occlusion ---------------------------------------------------------------


def test_occlusion_insensitive_stub_gives_zero_map():
    x0, obj = object_scene()
    a = FunctionAdapter(lambda x: two_class(obj), 2, (1, H, W))
    np.testing.assert_array_equal(occlusion_saliency(a, x0, 1, patch=4, stride=4), 0.0)


def test_occlusion_single_sensitive_patch():
    x0, obj = object_scene()
    s = occlusion_saliency(keyed_stub(obj, (9, 13)), x0, 1, patch=4, stride=4)
    expected = np.zeros((H, W))
    expected[8:12, 12:16] = 1.0
    np.testing.assert_array_equal(s, expected)


def test_occlusion_single_window_is_constant():
    x0, obj = object_scene()
    s = occlusion_saliency(keyed_stub(obj, (9, 13)), x0, 1, patch=H, stride=H)
    np.testing.assert_array_equal(s, 0.0)


def test_occlusion_bad_args():
    x0, obj = object_scene()
    with pytest.raises(ValueError):
        occlusion_saliency(keyed_stub(obj, (1, 1)), x0, 1, patch=0)


# --- Seg-Grad-CAM -------------------------------------------------------------


def test_grad_cam_single_map_constant_gradient():
    A = np.random.default_rng(0).random((1, 4, 4))
    s = grad_cam_map(A, np.full((1, 4, 4), 2.5), (4, 4))
    np.testing.assert_allclose(s, minmax_normalize(A[0]))


def test_grad_cam_negative_weights_give_zero():
    A = np.random.default_rng(1).random((3, 4, 4))
    np.testing.assert_array_equal(grad_cam_map(A, -np.ones((3, 4, 4)), (8, 8)), 0.0)


def test_seg_grad_cam_needs_activations():
    x0, obj = object_scene()
    with pytest.raises(CapabilityError):
        seg_grad_cam(keyed_stub(obj, (1, 1)), x0, 1)


def test_seg_grad_cam_matches_direct_recomputation():
    a = get_adapter("toy", image_size=16, seed=4)
    x0 = np.random.default_rng(2).random((1, 16, 16))
    probs = a.forward(x0)
    label = 1 if (probs.argmax(0) == 1).any() else 0
    s = seg_grad_cam(a, x0, label, SgcConfig())

    # independent oracle: torch hook on the bottleneck, autograd of the summed target
    module = a.module
    store = {}
    handle = module.bottleneck.register_forward_hook(lambda m, i, o: store.setdefault("a", o))
    xt = torch.from_numpy(x0[None].copy()).requires_grad_(True)
    with torch.enable_grad():
        p = torch.softmax(module(xt), dim=1)[0]
        region = torch.from_numpy(probs.argmax(0) == label)
        target = (p[label] * region).sum()
        (grad,) = torch.autograd.grad(target, store["a"])
    handle.remove()
    acts = store["a"][0].detach().numpy()
    w = grad[0].numpy().mean(axis=(1, 2))
    cam = np.maximum(np.einsum("k,khw->hw", w, acts), 0)
    up = resize_matrix(cam.shape[0], 16) @ cam @ resize_matrix(cam.shape[1], 16).T
    np.testing.assert_allclose(s, minmax_normalize(up), atol=1e-10)
    assert s.min() >= 0 and s.max() <= 1


def test_seg_grad_cam_unknown_layer():
    a = get_adapter("toy", image_size=16, seed=4)
    x0 = np.random.default_rng(2).random((1, 16, 16))
    label = int(a.forward(x0).argmax(0).max())
    with pytest.raises(KeyError):
        seg_grad_cam(a, x0, label, SgcConfig(layer="missing"))
