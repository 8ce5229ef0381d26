"""Acceptance checks, one ``criterion N: PASS|FAIL`` line each.

Run with pytest (lines are repeated in the terminal summary) or directly:
``python tests/test_acceptance.py``. The end-to-end phantom run takes about
a quarter of an hour on one desktop core and is shared by criteria 1 to 3.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from snerf import cli
from snerf.config import PipelineConfig
from snerf.images import read_png
from snerf.metrics import evaluate_agreement, gram_matrix_score, psnr, ssim
from snerf.nerf import HashGridConfig, ModelConfig, RadianceFieldModel, RenderConfig, batch_loss
from snerf.nerf.render import render_rays, unit_box_interval
from snerf.nerf.train import RayBank
from snerf.pipeline import run_pipeline
from snerf.posegen import read_dataset
from snerf.styletransfer import (
    StrotssConfig, WctConfig, color, haar_decompose, haar_reconstruct, relaxed_emd, strotss_objective, stylize,
    wct_stage, whiten,
)
from snerf.styletransfer.wct import level_stats

TINY = {
    "volume": {"dims": [48, 48, 48]},
    "poses": {"n": 6, "width": 32},
    "style": {"strotss": {"iterations": 5}},
    "nerf": {"grid": {"levels": 4, "log2_table_size": 12, "n_max": 128},
             "train": {"iterations": 20, "rays_per_batch": 128}, "render": {"n_samples": 32}},
    "eval": {"n_test_poses": 2},
}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """The default pipeline on the seed-42 phantom, timed end to end."""
    cfg = PipelineConfig.from_dict({}, out=str(tmp_path_factory.mktemp("full") / "run"))
    assert cfg["volume"]["phantom_seed"] == 42 and cfg["volume"]["dims"] == [96, 96, 96]
    assert cfg["poses"]["n"] == 100 and cfg["poses"]["width"] == 96 and cfg["eval"]["n_test_poses"] == 9
    assert cfg["style"]["mode"] == "hybrid" and cfg["nerf"]["reference"]
    start = time.perf_counter()
    result = run_pipeline(cfg, log=print)
    return cfg, result, time.perf_counter() - start


# ---------------------------------------------------------------- 1. end to end


@pytest.mark.slow
def test_criterion_1_end_to_end(full_run, report_criterion):
    cfg, result, seconds = full_run
    agg = result["report"].aggregate
    s, p, g = agg["ssim"]["mean"], agg["psnr_db"]["mean"], agg["gms"]["mean"]
    ok = s >= 0.70 and p >= 27.0 and g <= 0.20 and seconds <= 20 * 60
    report_criterion(1, bool(ok), f"SSIM {s:.3f} (>=0.70) PSNR {p:.2f} dB (>=27) GMS {g:.3f} (<=0.20) "
                                  f"runtime {seconds / 60:.1f} min (<=20)")
    assert len(result["report"].rows) == 9
    assert ok


# ------------------------------------------------------------------ 2. budgets


@pytest.mark.slow
def test_criterion_2_budgets(full_run, report_criterion):
    cfg, result, _ = full_run
    train_s = result["manifest"]["timings_s"]["train"]
    out = cfg.out
    content = read_dataset(out / "dataset").images[0]
    style = read_png(out / "style_target.png")
    t = time.perf_counter()
    stylize(content, style, "hybrid", cfg.wct, cfg.strotss)
    stylize_s = time.perf_counter() - t
    ok = train_s <= 300.0 and stylize_s <= 60.0
    report_criterion(2, ok, f"train {train_s:.1f} s (<=300) stylize one image {stylize_s:.1f} s (<=60)")
    assert ok


# ------------------------------------------------------------------ 3. ablation


@pytest.mark.slow
def test_criterion_3_style_ablation(full_run, report_criterion):
    cfg, _, _ = full_run
    out = cfg.out
    content = read_dataset(out / "dataset").images[:9]
    hybrid = read_dataset(out / "stylized").images[:9]
    truth = read_dataset(out / "reference").images[:9]
    style = read_png(out / "style_target.png")
    wct = [stylize(c, style, "wct", cfg.wct, cfg.strotss) for c in content]
    strotss = [stylize(c, style, "strotss", cfg.wct, cfg.strotss) for c in content]

    def score(images):
        rep = evaluate_agreement(images, truth)
        return rep.mean("gms"), rep.mean("ssim")

    (g_h, s_h), (g_w, _), (g_s, s_s) = score(hybrid), score(wct), score(strotss)
    ok = g_h <= min(g_w, g_s) + 0.02 and s_h >= s_s - 0.02
    report_criterion(3, ok, f"GMS hybrid {g_h:.3f} wct {g_w:.3f} strotss {g_s:.3f}; "
                            f"SSIM hybrid {s_h:.3f} strotss {s_s:.3f}")
    assert ok


# ----------------------------------------------------------- 4. gradient oracle


def nerf_gradient_error(rng) -> float:
    grid = HashGridConfig(levels=2, log2_table_size=4, features=2, n_min=2, n_max=4)
    model = RadianceFieldModel(ModelConfig(grid, hidden=8, geo_features=3), seed=1, dtype=torch.float64)
    with torch.no_grad():
        model.encoding.tables.copy_(torch.as_tensor(rng.normal(size=tuple(model.encoding.tables.shape))))
    o = rng.uniform(0.2, 0.8, (8, 3))
    o[:, 2] = -0.5
    d = np.column_stack([rng.normal(scale=0.1, size=(8, 2)), np.ones(8)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cfg = RenderConfig(n_samples=4, background=(0.1, 0.1, 0.1))
    t0, t1 = unit_box_interval(o, d, 0.0, math.inf)
    bank = RayBank(*(torch.as_tensor(a) for a in (o, d, t0, t1, rng.random((8, 3)))), 8)
    idx = torch.arange(8)

    def loss():
        return batch_loss(model, bank, idx, cfg)

    params = dict(model.named_parameters())
    grads = dict(zip(params, torch.autograd.grad(loss(), list(params.values()))))
    dens = [n for n in params if n.startswith("density_net")]
    col = [n for n in params if n.startswith("color_net")]
    picks = [("encoding.tables", int(k)) for k in rng.choice(params["encoding.tables"].numel(), 7, replace=False)]
    for group, count in ((dens, 7), (col, 6)):
        for _ in range(count):
            n = group[rng.integers(len(group))]
            picks.append((n, int(rng.integers(params[n].numel()))))
    worst, h = 0.0, 1e-6
    for name, k in picks:
        flat = params[name].data.view(-1)
        orig = float(flat[k])
        with torch.no_grad():
            flat[k] = orig + h
            up = float(loss())
            flat[k] = orig - h
            down = float(loss())
            flat[k] = orig
        fd, an = (up - down) / (2 * h), float(grads[name].reshape(-1)[k])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def strotss_gradient_error(rng) -> float:
    cfg = StrotssConfig(pyramid_levels=2, feature_samples=16)
    content, style = (torch.tensor(rng.random((4, 4, 3))) for _ in range(2))
    x = torch.tensor(rng.random((4, 4, 3)), requires_grad=True)
    rows, cols = torch.meshgrid(torch.arange(4), torch.arange(4), indexing="ij")
    pos = (rows.flatten(), cols.flatten())

    def f(img):
        return strotss_objective(img, content, style, pos, cfg, (pos[0].flip(0), pos[1]))

    (grad,) = torch.autograd.grad(f(x), x)
    flat, worst, h = x.detach().flatten(), 0.0, 1e-6
    for k in rng.choice(flat.numel(), 20, replace=False):
        plus, minus = flat.clone(), flat.clone()
        plus[k] += h
        minus[k] -= h
        fd = (float(f(plus.view(4, 4, 3))) - float(f(minus.view(4, 4, 3)))) / (2 * h)
        an = float(grad.flatten()[k])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_criterion_4_gradient_oracle(report_criterion):
    rng = np.random.default_rng(4)
    t = time.perf_counter()
    nerf_err = nerf_gradient_error(rng)
    style_err = strotss_gradient_error(rng)
    seconds = time.perf_counter() - t
    ok = nerf_err < 1e-3 and style_err < 1e-3 and seconds < 60.0
    report_criterion(4, ok, f"max rel error nerf {nerf_err:.1e} strotss {style_err:.1e} (<1e-3) "
                            f"in {seconds:.1f} s (<60)")
    assert ok


# ------------------------------------------------------- 5. quadrature identity


def test_criterion_5_quadrature_identity(report_criterion):
    rng = np.random.default_rng(5)
    grid = HashGridConfig(levels=4, log2_table_size=12, features=2, n_min=4, n_max=64)
    worst, total = 0.0, 0
    for k, scale in enumerate((0.1, 1.0, 3.0, 10.0, 30.0)):
        model = RadianceFieldModel(ModelConfig(grid), seed=k)
        with torch.no_grad():
            model.encoding.tables.copy_(torch.as_tensor(rng.normal(size=tuple(model.encoding.tables.shape)) * scale))
        origins = rng.uniform(-0.5, 1.5, (2000, 3))
        dirs = rng.normal(size=(2000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cfg = RenderConfig(n_samples=int(rng.integers(8, 97)))
        with torch.no_grad():
            _, w, t_final = render_rays(model, origins, dirs, cfg, u=rng.random((2000, cfg.n_samples)))
        worst = max(worst, float((w.sum(1) + t_final - 1).abs().max()))
        total += len(origins)
    ok = total == 10_000 and worst < 1e-6
    report_criterion(5, ok, f"{total} rays on 5 random models, max |sum w + T - 1| = {worst:.1e} (<1e-6)")
    assert ok


# ------------------------------------------------------------ 6. style algebra


def test_criterion_6_style_algebra(report_criterion):
    rng = np.random.default_rng(6)
    img = rng.random((64, 64, 3))
    haar_err = float(np.abs(haar_reconstruct(haar_decompose(img, 3)) - img).max())

    f = rng.normal(size=(4000, 4)) @ rng.normal(size=(4, 4)) + rng.normal(size=4)
    w = whiten(f)
    wc = w - w.mean(0)
    cov_err = float(np.abs(wc.T @ wc / len(w) - np.eye(4)).max())
    color_err = float(np.abs(color(w, level_stats(f)) - f).max())

    a = rng.normal(size=(50, 8))
    remd = relaxed_emd(a, a)

    yy, xx = np.mgrid[:32, :32] / 32
    x = np.clip(np.stack([0.5 + 0.3 * np.sin(6 * xx), 0.4 + 0.2 * np.cos(5 * yy), 0.3 + 0.2 * xx * yy], -1)
                + 0.05 * rng.random((32, 32, 3)), 0, 1)
    wct_err = np.abs(wct_stage(x, x, WctConfig(blend_alpha=1.0)) - x).reshape(-1, 3).max(0)

    ok = haar_err < 1e-6 and cov_err < 1e-4 and color_err < 1e-3 and abs(remd) < 1e-12 and (wct_err < 2e-3).all()
    report_criterion(6, bool(ok), f"haar {haar_err:.1e} whiten cov {cov_err:.1e} color(whiten) {color_err:.1e} "
                                  f"REMD(A,A) {remd:.1e} wct self-style per channel {wct_err.max():.1e}")
    assert ok


# --------------------------------------------------------------- 7. metrics


def test_criterion_7_metric_suite(report_criterion):
    rng = np.random.default_rng(7)
    x = rng.random((32, 32, 3))
    offset = psnr(np.full((8, 8, 3), 0.3), np.full((8, 8, 3), 0.4))
    images = [rng.random((32, 32, 3)) for _ in range(9)]
    agg = evaluate_agreement(images, images).aggregate
    degenerate = (agg["ssim"] == {"mean": 1.0, "std": 0.0} and agg["psnr_db"] == {"mean": 100.0, "std": 0.0}
                  and abs(agg["gms"]["mean"]) < 1e-12 and abs(agg["gms"]["std"]) < 1e-12)
    # the constant-offset PSNR is 20 dB up to the rounding of 0.4 - 0.3 in binary
    ok = abs(offset - 20.0) < 1e-9 and ssim(x, x) == 1.0 and abs(gram_matrix_score(x, x)) < 1e-12 and degenerate
    report_criterion(7, ok, f"psnr offset {offset:.12f} dB, ssim(x,x) {ssim(x, x)}, "
                            f"gms(x,x) {gram_matrix_score(x, x):.1e}, self report {'ok' if degenerate else 'wrong'}")
    assert ok


# ------------------------------------------------------------ 8. determinism


def test_criterion_8_determinism(tmp_path, report_criterion):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY))
    for name in ("a", "b"):
        assert cli.main(["pipeline", "--config", str(config), "--out", str(tmp_path / name), "--deterministic"]) == 0
    same_ckpt = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                    for f in ("model.snrf", "model_reference.snrf"))
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    same_report = ra["rows"] == rb["rows"] and ra["aggregate"] == rb["aggregate"]
    ok = same_ckpt and same_report
    report_criterion(8, ok, f"checkpoints identical {same_ckpt}, report metrics identical {same_report}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
