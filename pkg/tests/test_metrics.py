import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snerf.metrics import (
    DegenerateGramWarning, MetricsReport, evaluate_agreement, gram_matrices, gram_matrix_score, psnr, ssim,
)

LUMA = (0.299, 0.587, 0.114)


def brute_ssim(a, b, win=8):
    """Window-by-window SSIM straight from the definition."""
    ga, gb = a @ LUMA, b @ LUMA
    vals = []
    for i in range(ga.shape[0] - win + 1):
        for j in range(ga.shape[1] - win + 1):
            x, y = ga[i:i + win, j:j + win].ravel(), gb[i:i + win, j:j + win].ravel()
            mx, my = x.mean(), y.mean()
            vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
            cxy = ((x - mx) * (y - my)).mean()
            c1, c2 = 0.01**2, 0.03**2
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def brute_grams(img, levels):
    """Haar features by explicit 2x2 block loops, Grams by explicit sums."""
    grams, cur = [], img
    for lv in range(levels):
        h, w, c = cur.shape
        feats, ll = [], np.zeros((h // 2, w // 2, c))
        for i in range(h // 2):
            for j in range(w // 2):
                a, b, cc, d = cur[2 * i, 2 * j], cur[2 * i, 2 * j + 1], cur[2 * i + 1, 2 * j], cur[2 * i + 1, 2 * j + 1]
                ll[i, j] = (a + b + cc + d) / 2
                feats.append(np.concatenate([(a + b - cc - d) / 2, (a - b + cc - d) / 2, (a - b - cc + d) / 2,
                                             ll[i, j] / 2 ** (lv + 1)]))
        f = np.array(feats)
        grams.append(sum(np.outer(v, v) for v in f) / len(f))
        cur = ll
    return grams


def brute_gms(a, b, levels=3):
    sims = [np.sum(x * y) / (np.linalg.norm(x) * np.linalg.norm(y))
            for x, y in zip(brute_grams(a, levels), brute_grams(b, levels))]
    return 1 - np.mean(sims)


# --------------------------------------------------------------------- psnr


def test_psnr_examples(rng):
    a = rng.random((16, 16, 3))
    assert psnr(a, a) == 100.0
    assert psnr(np.full((8, 8, 3), 0.3), np.full((8, 8, 3), 0.4)) == pytest.approx(20.0)
    b = rng.random((16, 16, 3))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_offset():
    base = np.full((8, 8, 3), 0.2)
    values = [psnr(base, base + d) for d in (0.01, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


# --------------------------------------------------------------------- ssim


def test_ssim_examples(rng):
    a = rng.random((32, 32, 3))
    assert ssim(a, a) == 1.0
    expected = (2 * 0.16 + 1e-4) / (0.04 + 0.64 + 1e-4)
    assert ssim(np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.8)) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.4707, abs=1e-4)


def test_single_flipped_pixel(rng):
    a = rng.random((64, 64, 3))
    b = a.copy()
    b[30, 30] = 1 - b[30, 30]
    value = ssim(a, b)
    assert 0.9 < value < 1.0
    assert value == pytest.approx(brute_ssim(a, b), abs=1e-9)


def test_ssim_matches_direct_windows_and_is_symmetric(rng):
    a = rng.random((14, 12, 3))
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(brute_ssim(a, b), abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_ssim_rejects_tiny_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((7, 32, 3)), np.zeros((7, 32, 3)))


# ---------------------------------------------------------------------- gms


def test_gms_identity_and_brute_force(rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3)) ** 2
    assert gram_matrix_score(a, a) == pytest.approx(0.0, abs=1e-12)
    for got, ref in zip(gram_matrices(a, 3), brute_grams(a, 3)):
        np.testing.assert_allclose(got, ref, atol=1e-12)
    assert gram_matrix_score(a, b) == pytest.approx(brute_gms(a, b), abs=1e-12)


def fine_shuffle(img, rng):
    """Permute the four pixels inside every 2x2 block."""
    out = img.copy()
    h, w, _ = img.shape
    for i in range(0, h, 2):
        for j in range(0, w, 2):
            block = img[i:i + 2, j:j + 2].reshape(4, -1)
            out[i:i + 2, j:j + 2] = block[rng.permutation(4)].reshape(2, 2, -1)
    return out


def test_fine_shuffle_is_closer_than_unrelated_image(rng):
    yy, xx = np.mgrid[:32, :32] / 32
    images = [
        np.stack([xx, yy, xx * yy], -1),
        np.stack([0.5 + 0.4 * np.sin(9 * xx)] * 3, -1) * [1.0, 0.6, 0.3],
        rng.random((32, 32, 3)) * [0.2, 0.9, 0.5],
    ]
    for k, img in enumerate(images):
        unrelated = images[(k + 1) % 3]
        shuffled = fine_shuffle(img, rng)
        s_shuf, s_other = gram_matrix_score(img, shuffled), gram_matrix_score(img, unrelated)
        assert s_shuf < s_other
        assert s_shuf == pytest.approx(brute_gms(img, shuffled), abs=1e-12)
        assert s_other == pytest.approx(brute_gms(img, unrelated), abs=1e-12)


def test_gms_invariant_under_aligned_block_permutation(rng):
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    perm = rng.permutation(16)

    def permute(x):
        blocks = x.reshape(4, 8, 4, 8, 3).transpose(0, 2, 1, 3, 4).reshape(16, 8, 8, 3)[perm]
        return blocks.reshape(4, 4, 8, 8, 3).transpose(0, 2, 1, 3, 4).reshape(32, 32, 3)

    assert gram_matrix_score(permute(a), permute(b)) == pytest.approx(gram_matrix_score(a, b), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1)))
def test_gms_range(a, b):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGramWarning)
        value = gram_matrix_score(a, b)
    assert -1e-12 <= value <= 2.0 + 1e-12


def test_degenerate_gram_warns():
    with pytest.warns(DegenerateGramWarning):
        assert gram_matrix_score(np.zeros((16, 16, 3)), np.ones((16, 16, 3))) == 1.0


# ------------------------------------------------------------------- report


def test_self_agreement_report(rng):
    images = [rng.random((16, 16, 3)) for _ in range(9)]
    rep = evaluate_agreement(images, images)
    agg = rep.aggregate
    assert len(rep.rows) == 9
    assert agg["ssim"] == {"mean": 1.0, "std": 0.0}
    assert agg["psnr_db"] == {"mean": 100.0, "std": 0.0}
    assert agg["gms"]["mean"] == pytest.approx(0.0, abs=1e-12)
    lines = rep.table("self").splitlines()
    assert lines[0].split() == ["SSIM", "PSNR", "GMS"]
    assert lines[1].split()[0] == "self" and "1.00" in lines[1] and "100.00" in lines[1]
    assert "LPIPS" not in rep.table()


def test_aggregate_is_row_statistics(rng, tmp_path):
    a = [rng.random((16, 16, 3)) for _ in range(5)]
    b = [np.clip(x + 0.1 * rng.normal(size=x.shape), 0, 1) for x in a]
    rep = evaluate_agreement(a, b, labels=[f"p{i}" for i in range(5)])
    for key in ("ssim", "psnr_db", "gms"):
        col = [r[key] for r in rep.rows]
        assert rep.mean(key) == pytest.approx(sum(col) / 5, abs=1e-12)
        m = sum(col) / 5
        assert rep.std(key) == pytest.approx(math.sqrt(sum((c - m) ** 2 for c in col) / 4), abs=1e-12)
    assert all(r["lpips"] is None for r in rep.rows)
    rep.save(tmp_path / "r.json")
    back = MetricsReport.from_json(json.loads((tmp_path / "r.json").read_text()))
    assert back.aggregate == rep.aggregate and back.labels == rep.labels


def test_count_mismatch(rng):
    with pytest.raises(ValueError):
        evaluate_agreement([rng.random((8, 8, 3))], [])
