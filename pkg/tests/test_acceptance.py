"""Acceptance suite: one test per criterion, each at its stated tolerance.

A summary line per criterion is printed at the end of the run.
"""
import json
import math
import os
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
import torch

from helpers import brute_dsc, brute_match, brute_nsd, fd_probes, module_fd_probes, naive_scan
from tgdm.lossmetrics import dice_ce_loss, dsc, match_loss, nsd
from tgdm.net import GDM, PSM, NetConfig, TGDMNet
from tgdm.phantom import PhantomProfile, generate_case, generate_dataset
from tgdm.pipeline import ablation_run, evaluate_split, predict_split, preset, train_stage1, train_stage2
from tgdm.pipeline.ablation import AblationTable
from tgdm.pipeline.infer import Predictor
from tgdm.net import load_checkpoint
from tgdm.ssm import TAYLOR_EPS, MambaBlock, discretize, selective_scan
from tgdm.topo import TemplateAtlas, assign_point_counts, skeletonize_3d
from tgdm.volgrid import LabelGrid, VolumeGrid, read_grid, write_grid

f64 = torch.float64
REDUCED_BENCHMARK = Path(__file__).resolve().parent.parent / "benchmarks" / "reduced" / "ablation.json"


# -- 1 --------------------------------------------------------------------------

@pytest.mark.criterion(1, "scan vs naive recurrence, 200 instances, rel err < 1e-5, < 1 min")
def test_c01_scan_oracle(detail):
    rng = np.random.default_rng(2024)
    worst, elapsed = 0.0, 0.0
    for i in range(200):
        b, L, d, n = int(rng.integers(1, 3)), int(rng.integers(1, 257)), int(rng.integers(1, 5)), int(rng.integers(1, 17))
        x = rng.normal(size=(b, L, d))
        delta = rng.uniform(1e-3, 1.0, size=(b, L, d))
        A = -rng.uniform(0.05, 4.0, size=(d, n))
        B, C = rng.normal(size=(b, L, n)), rng.normal(size=(b, L, n))
        D = rng.normal(size=d)
        ref = naive_scan(x, delta, A, B, C, D)
        args = [torch.tensor(t) for t in (x, delta, A, B, C, D)]
        for chunk in (None, 32):
            t0 = time.perf_counter()
            y = selective_scan(*args, chunk_size=chunk).numpy()
            elapsed += time.perf_counter() - t0
            worst = max(worst, np.abs(y - ref).max() / max(np.abs(ref).max(), 1e-300))
    detail(f"max rel err {worst:.2e}, scan time {elapsed:.1f} s (both scan paths)")
    assert worst < 1e-5 and elapsed < 60


# -- 2 --------------------------------------------------------------------------

def _exact_bbar(delta, a, b):
    with mpmath.workdps(50):
        z = mpmath.mpf(delta) * mpmath.mpf(a)
        return float(mpmath.expm1(z) / z * mpmath.mpf(delta) * mpmath.mpf(b))


@pytest.mark.criterion(2, "discretization closed forms to 1e-6, guard continuity to 1e-5")
def test_c02_discretization(detail):
    errs = []
    delta = torch.tensor([0.1, 0.5, 1.0, 2.0], dtype=f64)
    b = torch.tensor([0.3, -1.2, 2.0, 0.7], dtype=f64)
    for a in (0.0, 1e-12, -1e-9):
        _, b_bar = discretize(delta, torch.full_like(delta, a), b)
        errs.append((b_bar - delta * b).abs().max().item())
    a_bar, _ = discretize(torch.tensor(math.log(2), dtype=f64), torch.tensor(-1.0, dtype=f64), torch.tensor(1.0, dtype=f64))
    errs.append(abs(a_bar.item() - 0.5))
    closed = max(errs)

    jumps, oracle = [], []
    for dtype in (torch.float32, f64):
        for sign in (-1, 1):
            for bval in (1.0, -3.0):
                z = torch.tensor([sign * TAYLOR_EPS * (1 - 1e-6), sign * TAYLOR_EPS * (1 + 1e-6)], dtype=dtype)
                one = torch.ones_like(z)
                _, bb = discretize(one, z, bval * one)
                jumps.append(abs(bb[0].item() - bb[1].item()))
                oracle += [abs(bb[k].item() - _exact_bbar(1.0, z[k].item(), bval)) for k in range(2)]
    detail(f"closed-form err {closed:.1e}, guard jump {max(jumps):.1e}, guard vs 50-digit {max(oracle):.1e}")
    assert closed < 1e-6 and max(jumps) < 1e-5 and max(oracle) < 1e-5


# -- 3 --------------------------------------------------------------------------

def _pts(counts, seed, batch=1):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(batch, n, 3, generator=g, dtype=f64) for n in counts]


@pytest.mark.criterion(3, "fd gradients of five components, >= 20 probes each, rel err < 1e-3, < 10 min")
def test_c03_gradients(detail):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    results = {}

    blk = MambaBlock(6, d_state=4).double()
    x, w = torch.randn(2, 9, 6, dtype=f64), torch.randn(2, 9, 6, dtype=f64)
    results["mamba_block"] = module_fd_probes(blk, lambda: (blk(x) * w).sum(), 27, seed=1)

    psm = PSM(4, 6, d_state=3).double()
    with torch.no_grad():
        psm.fc_out.weight.normal_(0, 0.3)  # move off the near-identity init so every path carries gradient
    feat = torch.randn(1, 4, 5, 5, 5, dtype=f64)
    pts = _pts([6, 9], seed=4)
    wp = [torch.randn(1, n, 3, dtype=f64) for n in (6, 9)]
    results["psm_forward"] = module_fd_probes(psm, lambda: sum((p * q).sum() for p, q in zip(psm(feat, pts), wp)), 24, seed=2)

    gdm = GDM(4, num_segments=3, d_state=3).double()
    gpts = _pts([6, 7, 5], seed=3)
    wg = torch.randn(1, 4, 5, 5, 5, dtype=f64)
    results["gdm_forward"] = module_fd_probes(gdm, lambda: (gdm(feat, gpts) * wg).sum(), 24, seed=3)

    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 3, 3, 3, generator=g, dtype=f64, requires_grad=True)
    target = torch.randint(0, 4, (2, 3, 3, 3), generator=g)
    results["dice_ce_loss"] = fd_probes(lambda: sum(dice_ce_loss(logits, target)), {"logits": logits}, 24, seed=4)

    pred = [p.requires_grad_() for p in _pts([5, 6], seed=5, batch=2)]
    gt = _pts([5, 6], seed=6, batch=2)
    results["match_loss"] = fd_probes(lambda: match_loss(pred, gt)[0], {"s1": pred[0], "s2": pred[1]}, 24, seed=5)

    elapsed = time.perf_counter() - t0
    worst = {k: max(p[-1] for p in v) for k, v in results.items()}
    detail(", ".join(f"{k} {len(results[k])}p {worst[k]:.1e}" for k in results) + f"; {elapsed:.0f} s")
    assert all(len(v) >= 20 for v in results.values())
    assert max(worst.values()) < 1e-3 and elapsed < 600


# -- 4 --------------------------------------------------------------------------

@pytest.mark.criterion(4, "assignment matching equals exhaustive minimum, N_v <= 6, 100 trials, < 1e-9")
def test_c04_matching_oracle(detail):
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(1, 7))
        a, b = rng.random((n, 3)), rng.random((n, 3))
        if trial % 4 == 0 and n > 1:  # duplicated points create tied optima
            a[1] = a[0]
            b[-1] = b[0]
        got = match_loss([torch.tensor(a[None])], [torch.tensor(b[None])])[0].item()
        worst = max(worst, abs(got - brute_match(a, b)))
    detail(f"max |diff| {worst:.1e}")
    assert worst < 1e-9


# -- 5 --------------------------------------------------------------------------

@pytest.mark.criterion(5, "DSC/NSD vs brute force on 50 masks <= 5^3 (< 1e-9), NSD monotone in tau on 20 pairs")
def test_c05_metric_oracles(detail):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        shape = tuple(int(s) for s in rng.integers(1, 6, size=3))
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        p = rng.random(shape) < rng.uniform(0.1, 0.7)
        g = rng.random(shape) < rng.uniform(0.1, 0.7)
        tau = float(rng.uniform(0.3, 2.5))
        pg, gg = LabelGrid(p.astype(np.uint8), 2, spacing), LabelGrid(g.astype(np.uint8), 2, spacing)
        for got, ref in ((dsc(pg, gg, 1), brute_dsc(p, g)), (nsd(pg, gg, 1, tau), brute_nsd(p, g, tau, np.array(spacing)))):
            if math.isnan(got) or math.isnan(ref):
                assert math.isnan(got) and math.isnan(ref)
            else:
                worst = max(worst, abs(got - ref))
    taus = np.linspace(0.1, 4.0, 25)
    monotone = True
    for _ in range(20):
        p = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
        g = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
        vals = [nsd(p, g, 1, t) for t in taus]
        monotone &= all(a <= b for a, b in zip(vals, vals[1:]))
    detail(f"max abs err {worst:.1e}, monotone on 20 pairs: {monotone}")
    assert worst < 1e-9 and monotone


# -- 6 --------------------------------------------------------------------------

def _polyline_distance(points, polyline):
    a, b = polyline[:-1], polyline[1:]
    ab = b - a
    t = np.clip(np.einsum("psk,sk->ps", points[:, None] - a[None], ab) / np.maximum((ab**2).sum(1), 1e-12), 0, 1)
    proj = a[None] + t[..., None] * ab[None]
    return np.sqrt(((points[:, None] - proj) ** 2).sum(-1)).min(1)


@pytest.mark.criterion(6, "point-count endpoints exact on 100 sets; radius-3 tube skeletons within 1 voxel at > 95%")
def test_c06_topology(detail):
    rng = np.random.default_rng(6)
    endpoints_ok = True
    for i in range(100):
        m0, m1 = (8, 32) if i % 2 == 0 else sorted(int(v) for v in rng.integers(2, 40, size=2))
        k = int(rng.integers(2, 21))
        lengths = {s: float(v) for s, v in enumerate(rng.uniform(1, 300, size=k), 1)}
        counts = assign_point_counts(lengths, m0, m1)
        lo, hi = min(lengths, key=lengths.get), max(lengths, key=lengths.get)
        endpoints_ok &= counts[lo] == m0 and counts[hi] == m1

    profile = PhantomProfile(radius_range=(3.0, 3.0))
    near = total = 0
    for seed in range(3):
        case = generate_case(profile, seed)
        for seg, axis in case.gt_centerlines.items():
            skel = np.argwhere(skeletonize_3d(case.labels.data == seg)).astype(np.float64)
            d = _polyline_distance(skel, axis)
            near += int((d <= 1.0).sum())
            total += len(d)
    frac = near / total
    detail(f"endpoints exact: {endpoints_ok}; {frac:.1%} of {total} skeleton voxels within 1 voxel of the axis")
    assert endpoints_ok and frac > 0.95


# -- 7 --------------------------------------------------------------------------

def desk_verdict(table: AblationTable):
    """The three directional checks on a desk-scale ablation table."""
    m = {r.name: r for r in table.rows}
    d = {k: r.dsc[0] for k, r in m.items()}
    checks = {
        "a": d["M4"] >= 0.60,
        "b": d["M4"] >= d["M3"] >= d["M2"] >= d["M0"] and d["M4"] - d["M0"] >= 0.03,
        "c": m["M4"].nsd[0] > m["M0"].nsd[0],
    }
    text = " ".join(f"{k} {100 * v:.1f}" for k, v in d.items()) + " | " + " ".join(f"({k}) {v}" for k, v in checks.items())
    return checks, text


@pytest.mark.criterion(7, "desk-scale benchmark: M4 DSC >= 0.60, M4 >= M3 >= M2 >= M0 (+3 pts), M4 NSD > M0 NSD")
def test_c07_desk_benchmark(detail, tmp_path):
    """Evaluated on a real desk-scale run.

    ``TGDM_DESK_ABLATION`` may point at the ``ablation.json`` of a finished
    ``tgdm ablate --preset desk`` run; ``TGDM_RUN_DESK=1`` runs it here. Without
    either, the benchmark is reported as not attained on this machine.
    """
    given = os.environ.get("TGDM_DESK_ABLATION")
    if os.environ.get("TGDM_RUN_DESK") == "1":
        cfg = preset("desk").with_(data_root=str(tmp_path / "data"))
        for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
            generate_dataset(cfg.phantom, n, split, cfg.split_dir(split))
        t0 = time.time()
        table = ablation_run(cfg, tmp_path / "ablation")
        hours = (time.time() - t0) / 3600
        checks, text = desk_verdict(table)
        detail(f"{text} | {hours:.1f} h")
        assert all(checks.values()) and hours < 12
    elif given:
        table = AblationTable.from_json(json.loads(Path(given).read_text()))
        checks, text = desk_verdict(table)
        detail(text)
        assert all(checks.values())
    else:
        note = "desk run not available (about 35 CPU-hours on this one-core machine)"
        if REDUCED_BENCHMARK.exists():
            _, text = desk_verdict(AblationTable.from_json(json.loads(REDUCED_BENCHMARK.read_text())))
            note += f"; reduced-scale run: {text}"
        detail(note)
        pytest.xfail(note)


# -- 8 --------------------------------------------------------------------------

@pytest.mark.criterion(8, "zeroed GDM output projections reproduce the GDM-disabled forward bit-for-bit")
def test_c08_gdm_identity(detail):
    torch.manual_seed(8)
    cfg = NetConfig.desk()
    net = TGDMNet(cfg).eval()
    with torch.no_grad():
        for blk in net.gdm.mamba:
            blk.out_proj.weight.zero_()
    plain = TGDMNet(cfg.with_(use_tgdm=False)).eval()
    plain.backbone.load_state_dict(net.backbone.state_dict())
    equal = 0
    g = torch.Generator().manual_seed(80)
    for _ in range(5):
        x = torch.randn(1, cfg.in_channels, *cfg.stage2_shape, generator=g)
        p_init = [torch.rand(1, int(n), 3, generator=g) for n in torch.randint(8, 33, (cfg.num_segments,), generator=g)]
        with torch.no_grad():
            equal += int(torch.equal(net(x, p_init)[0], plain(x)[0]))
    detail(f"{equal}/5 inputs identical ({len(net.gdm.mamba)} GDM branches zeroed)")
    assert equal == 5 and len(net.gdm.mamba) == 20


# -- 9 --------------------------------------------------------------------------

@pytest.mark.criterion(9, "identical-seed desk-architecture runs agree on val DSC within 1e-6")
def test_c09_reproducibility(detail, tmp_path):
    # desk networks and phantoms; epochs and case counts shortened to keep the check under a few minutes
    cfg = preset("desk").with_(data_root=str(tmp_path / "data"), n_train=2, n_val=2, epochs=1)
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        generate_dataset(cfg.phantom, n, split, cfg.split_dir(split))
    scores, weights = [], []
    for run in ("a", "b"):
        s1 = train_stage1(cfg, tmp_path / run / "s1")
        s2 = train_stage2(cfg, tmp_path / run / "s2", s1.checkpoint)
        predictor = Predictor(cfg, load_checkpoint(s2.checkpoint)[0], load_checkpoint(s1.checkpoint)[0], TemplateAtlas.load(s2.atlas))
        pred = predict_split(predictor, cfg.split_dir("val"), tmp_path / run / "pred")
        scores.append(evaluate_split(pred, cfg.split_dir("val")).aggregate("dsc")[0])
        weights.append(predictor.stage2.state_dict())
    same = all(torch.equal(weights[0][k], weights[1][k]) for k in weights[0])
    detail(f"val DSC {scores[0]:.6f} vs {scores[1]:.6f}; stage-2 weights identical: {same}")
    assert abs(scores[0] - scores[1]) <= 1e-6 and same


# -- 10 -------------------------------------------------------------------------

@pytest.mark.criterion(10, "1000-case randomized .vgf round trip, bit-exact")
def test_c10_vgf_round_trip(detail, tmp_path):
    rng = np.random.default_rng(10)
    exact = 0
    for i in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 9, size=3))
        spacing = tuple(float(v) for v in rng.uniform(0.05, 10.0, size=3))
        origin = tuple(float(v) for v in rng.normal(0, 500, size=3))
        if i % 2:
            k = int(rng.integers(2, 257))
            grid = LabelGrid(rng.integers(0, k, size=shape, dtype=np.uint8), k, spacing, origin)
        else:
            bits = rng.integers(0, 2**32, size=shape, dtype=np.uint64).astype(np.uint32)
            data = bits.view(np.float32)
            data = np.where(np.isfinite(data), data, np.float32(0.0))
            grid = VolumeGrid(data, spacing, origin)
        write_grid(tmp_path / f"g{i}", grid)
        back = read_grid(tmp_path / f"g{i}")
        same = (
            type(back) is type(grid)
            and back.data.dtype == grid.data.dtype
            and back.data.tobytes() == grid.data.tobytes()
            and back.spacing == grid.spacing
            and back.origin == grid.origin
            and getattr(back, "num_classes", None) == getattr(grid, "num_classes", None)
        )
        exact += int(same)
    detail(f"{exact}/1000 bit-exact")
    assert exact == 1000
