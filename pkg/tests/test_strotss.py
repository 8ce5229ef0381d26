import dataclasses

import numpy as np
import pytest
import torch

from snerf.camera import CameraIntrinsics
from snerf.metrics import gram_matrix_score
from snerf.posegen import PosedDataset, RoiSpec, sample_poses
from snerf.styletransfer import (
    NonFiniteLossError, StrotssConfig, relaxed_emd, self_similarity_loss, strotss_objective, strotss_refine, stylize,
    stylize_dataset,
)
from snerf.volume import TransferFunction, render_volume

FAST = StrotssConfig(iterations=40, scales=2, feature_samples=128)


def brute_remd(a, b):
    def cos_d(x, y):
        return 1 - x @ y / (np.linalg.norm(x) * np.linalg.norm(y))

    d = np.array([[cos_d(x, y) for y in b] for x in a])
    return max(d.min(1).mean(), d.min(0).mean())


def brute_self_sim(c, o):
    def dmat(f):
        d = np.array([[1 - x @ y / (np.linalg.norm(x) * np.linalg.norm(y)) for y in f] for x in f])
        return d / d.sum(1, keepdims=True)

    return np.abs(dmat(c) - dmat(o)).mean()


# ----------------------------------------------------------------- REMD


def test_remd_examples():
    assert relaxed_emd(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == pytest.approx(1.0)
    a = np.random.default_rng(0).normal(size=(20, 5))
    assert relaxed_emd(a, a) == pytest.approx(0.0, abs=1e-12)


def test_remd_against_brute_force(rng):
    a, b = rng.normal(size=(13, 4)), rng.normal(size=(7, 4))
    assert relaxed_emd(a, b) == pytest.approx(brute_remd(a, b), abs=1e-12)
    assert relaxed_emd(a, b) == pytest.approx(relaxed_emd(b, a), abs=1e-12)
    assert relaxed_emd(a, b) >= 0


def test_remd_is_scale_invariant(rng):
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    scaled = a * rng.uniform(0.1, 10, size=(10, 1))
    assert relaxed_emd(scaled, b) == pytest.approx(relaxed_emd(a, b), abs=1e-12)


def test_remd_drops_zero_vectors(rng):
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    padded = np.vstack([a, np.zeros((2, 3))])
    assert relaxed_emd(padded, b) == pytest.approx(relaxed_emd(a, b), abs=1e-12)
    assert np.isfinite(relaxed_emd(np.zeros((3, 3)), b))


# ------------------------------------------------------- self-similarity


def test_self_similarity_identity_and_scale(rng):
    c = rng.normal(size=(12, 6))
    assert self_similarity_loss(c, c) == pytest.approx(0.0, abs=1e-12)
    assert self_similarity_loss(c, 2 * c) == pytest.approx(0.0, abs=1e-12)


def test_self_similarity_permutation_matches_brute_force(rng):
    c = rng.normal(size=(9, 4))
    o = c[rng.permutation(9)]
    value = self_similarity_loss(c, o)
    assert value > 0
    assert value == pytest.approx(brute_self_sim(c, o), abs=1e-12)


def test_self_similarity_size_mismatch(rng):
    with pytest.raises(ValueError):
        self_similarity_loss(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))


# ------------------------------------------------------------- objective


def test_objective_gradient_matches_finite_differences(rng):
    cfg = StrotssConfig(pyramid_levels=2, feature_samples=16)
    content = torch.tensor(rng.random((4, 4, 3)))
    style = torch.tensor(rng.random((4, 4, 3)))
    x = torch.tensor(rng.random((4, 4, 3)), requires_grad=True)
    rows, cols = torch.meshgrid(torch.arange(4), torch.arange(4), indexing="ij")
    pos = (rows.flatten(), cols.flatten())
    spos = (pos[0].flip(0), pos[1])

    def f(img):
        return strotss_objective(img, content, style, pos, cfg, spos)

    (grad,) = torch.autograd.grad(f(x), x)
    h = 1e-6
    flat = x.detach().flatten()
    for k in rng.choice(flat.numel(), 10, replace=False):
        plus, minus = flat.clone(), flat.clone()
        plus[k] += h
        minus[k] -= h
        fd = (float(f(plus.view(4, 4, 3))) - float(f(minus.view(4, 4, 3)))) / (2 * h)
        an = float(grad.flatten()[k])
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6), (k, fd, an)


# ---------------------------------------------------------------- refine


def scene_pair(rng, n=32):
    yy, xx = np.mgrid[:n, :n] / n
    content = np.stack([0.4 + 0.2 * np.sin(7 * xx + 3 * yy)] * 3, -1) + 0.02 * rng.random((n, n, 3))
    stripes = (np.sin(25 * xx) > 0).astype(float)
    style = np.stack([0.2 + 0.7 * stripes, 0.1 + 0.3 * stripes, 0.05 + 0.2 * (1 - stripes)], -1)
    return np.clip(content, 0, 1), style


def test_refine_with_style_equal_to_init_stays_put(rng):
    content, _ = scene_pair(rng)
    out = strotss_refine(content, content, FAST)
    assert np.abs(out - content).max() < 0.05


def test_refine_history_is_monotone_and_deterministic(rng):
    content, style = scene_pair(rng)
    out, hist = strotss_refine(content, style, FAST, return_history=True)
    assert len(hist) == 1 + FAST.iterations * FAST.scales
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]
    again = strotss_refine(content, style, FAST)
    np.testing.assert_array_equal(out, again)
    other = strotss_refine(content, style, dataclasses.replace(FAST, seed=3))
    assert not np.array_equal(out, other)


def test_high_style_weight_raises_contrast(rng):
    gray = np.full((32, 32, 3), 0.5) + 0.01 * rng.random((32, 32, 3))
    _, style = scene_pair(rng)
    cfg = dataclasses.replace(FAST, content_weight=0.01, style_weight=10.0, iterations=60)
    out = strotss_refine(gray, style, cfg)
    assert out.std() > gray.std()


def test_hybrid_self_style_is_near_identity(rng):
    content, _ = scene_pair(rng)
    assert np.abs(stylize(content, content, "hybrid", strotss_cfg=FAST) - content).max() < 0.05


def test_background_is_untouched(rng):
    content, style = scene_pair(rng)
    content[:, :8] = 0.0
    out = strotss_refine(content, style, FAST)
    np.testing.assert_array_equal(out[:, :8], 0.0)


def test_non_finite_loss_reports_iteration(rng):
    content, style = scene_pair(rng)
    style[5, 5, 0] = np.inf
    with pytest.raises(NonFiniteLossError) as info:
        strotss_refine(content, style, dataclasses.replace(FAST, fg_threshold=None))
    assert info.value.iteration == 0


@pytest.mark.parametrize("kwargs", [dict(iterations=0), dict(feature_samples=1), dict(style_weight=-1.0),
                                    dict(step_size=0.0), dict(scales=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        StrotssConfig(**kwargs)


def test_stylization_moves_texture_towards_style(phantom_scene):
    vol, roi, _ = phantom_scene
    intr = CameraIntrinsics.default(64)
    pose = sample_poses(roi, 1, (180.0, 180.0), 0.0, 0.0)[0]
    content = render_volume(vol, TransferFunction.preoperative(), pose, intr)
    surgical = render_volume(vol, TransferFunction.intraoperative(), sample_poses(roi, 1, seed=4)[0], intr)
    out = stylize(content, surgical, "hybrid", strotss_cfg=FAST)
    assert gram_matrix_score(out, surgical) < gram_matrix_score(content, surgical)


# --------------------------------------------------------------- dataset


def tiny_dataset(images):
    intr = CameraIntrinsics.default(images[0].shape[1])
    poses = sample_poses(RoiSpec((0.0, 0.0, 0.0)), len(images), seed=1)
    return PosedDataset(intr, list(zip(poses, images)))


def test_dataset_keeps_poses_and_matches_direct_calls(rng):
    content, style = scene_pair(rng)
    other = np.clip(content[::-1] * 1.1, 0, 1)
    ds = tiny_dataset([content, other, content])
    cfg = dataclasses.replace(FAST, iterations=10)
    out = stylize_dataset(ds, style, "hybrid", strotss_cfg=cfg)
    assert out.provenance == "stylized" and len(out) == 3
    for a, b in zip(ds.poses, out.poses):
        np.testing.assert_array_equal(a.transform, b.transform)
    np.testing.assert_array_equal(out.images[0], stylize(content, style, "hybrid", strotss_cfg=cfg))
    np.testing.assert_array_equal(out.images[0], out.images[2])
    assert ds.provenance == "preoperative"
