"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-6 and 8 are fast property checks. Criterion 9 runs the tiny
profile end to end twice through the CLI. Criteria 7 and 10 share a
three-seed desk-scale experiment (hybrid vs real-only segmenter training)
executed once in a session-scoped fixture.
"""
import json
import math
import statistics
import time

import numpy as np
import pytest
import torch
import yaml

from mmtumor import cli, evaluation, mcs, ms, ncg, phantom, volumes
from mmtumor.maskops import (ElasticParams, connected_components, dilate_annotation,
                             ellipsoid_mask, postprocess_prediction, sample_tumor_mask)
from mmtumor.maskops import EllipsoidSpec
from mmtumor.volumes import BinaryMask3D, MultimodalCase, Volume3D

torch.set_num_threads(1)


def report(n, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {n}: {tag}{' — ' + detail if detail else ''}")
    assert ok, f"criterion {n} failed: {detail}"


# --- 1: metrics oracle ---

def brute_metrics(pred, gt):
    tp = fp = fn = 0
    for z in range(pred.shape[0]):
        for y in range(pred.shape[1]):
            for x in range(pred.shape[2]):
                p, g = bool(pred[z, y, x]), bool(gt[z, y, x])
                if p and g:
                    tp += 1
                elif p:
                    fp += 1
                elif g:
                    fn += 1
    if tp + fp + fn == 0:
        return (1.0, 1.0, 1.0, 1.0)
    return (2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn),
            tp / (tp + fn) if tp + fn else 0.0, tp / (tp + fp) if tp + fp else 0.0)


def test_criterion_1_metrics_oracle():
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(100):
        p = (rng.random((8, 8, 8)) < rng.uniform(0, 0.4)).astype(np.uint8)
        g = (rng.random((8, 8, 8)) < rng.uniform(0, 0.4)).astype(np.uint8)
        m = evaluation.compute_metrics(p, g)
        ok = ok and m == brute_metrics(p, g)
        dsc, jac = m[0], m[1]
        ok = ok and abs(dsc - 2 * jac / (1 + jac)) < 1e-12
    report(1, ok, "compute_metrics == brute-force counts on 100 random pairs; "
                  "DSC-JAC identity to 1e-12")


# --- 2: diffusion marginals ---

def test_criterion_2_diffusion_marginals():
    T = 100
    sched = mcs.make_schedule(T, 1e-4, 0.02)
    n = 10_000
    z0_val = 0.7
    ok = True
    details = []
    for t in (1, T // 2, T):
        ab = sched.alpha_bar[t - 1]
        eps = np.random.default_rng(t).standard_normal(n)
        zt = mcs.q_sample(np.full(n, z0_val), t, eps, sched)
        mean_err = abs(zt.mean() - math.sqrt(ab) * z0_val)
        mean_tol = 4 * math.sqrt(1 - ab) / math.sqrt(n)
        var_err = abs(zt.var() - (1 - ab))
        var_tol = 4 * (1 - ab) * math.sqrt(2 / n)
        ok = ok and mean_err < mean_tol and var_err < var_tol
        details.append(f"t={t}")
    report(2, ok, "q_sample mean/variance within 4 SE at N=10000 for " + ", ".join(details))


# --- 3: schedule invariants ---

def test_criterion_3_schedule_invariants():
    ok = True
    for T in (1, 2, 100, 1000):
        s = mcs.make_schedule(T, 1e-4, 0.02)
        if T > 1:
            ok = ok and bool(np.all(np.diff(s.alpha_bar) < 0))
        prod = 1.0
        for t in range(T):
            prod *= 1.0 - s.betas[t]
            ok = ok and abs(s.alpha_bar[t] - prod) < 1e-10
    report(3, ok, "alpha_bar strictly decreasing; cumulative product to 1e-10 "
                  "for T in {1,2,100,1000}")


# --- 4: loss gradients vs finite differences ---

def _fd_check(loss_fn, theta, indices, h=1e-6, rtol=1e-3):
    loss = loss_fn()
    theta.grad = None
    loss.backward()
    for idx in indices:
        base = theta.detach().view(-1)[idx].item()
        vals = []
        for delta in (h, -h):
            with torch.no_grad():
                theta.view(-1)[idx] = base + delta
            vals.append(float(loss_fn().detach()))
        with torch.no_grad():
            theta.view(-1)[idx] = base
        fd = (vals[0] - vals[1]) / (2 * h)
        an = float(theta.grad.view(-1)[idx])
        if abs(fd - an) > rtol * max(1.0, abs(an)):
            return False
    return True


def test_criterion_4_loss_gradients():
    rng = np.random.default_rng(1)
    # seg_loss on a 2^3 grid in double precision
    fg = rng.uniform(0.1, 0.9, (2, 2, 2))
    g = (rng.random((2, 2, 2)) < 0.5).astype(np.float64)
    probs = torch.nn.Parameter(torch.from_numpy(np.stack([1.0 - fg, fg])))
    cfg = ms.SegLossConfig()
    seg_ok = _fd_check(lambda: ms.seg_loss(probs, g, cfg), probs, (0, 5, 9, 15))

    # ldm_loss through a stub network whose output is the parameter
    sched = mcs.make_schedule(5, 0.1, 0.2)
    z0 = rng.normal(0, 1, (3, 4, 4, 4))
    eps = rng.normal(0, 1, (3, 4, 4, 4))
    y = np.ones((4, 4, 4))
    theta = torch.nn.Parameter(torch.from_numpy(rng.normal(0, 1, (1, 3, 4, 4, 4))))

    class Stub:
        trained = True

        def __call__(self, z, ym, t):
            return theta

    ldm_ok = _fd_check(lambda: mcs.ldm_loss(Stub(), z0, y, 3, eps, sched),
                       theta, (0, 31, 77, 150))
    report(4, seg_ok and ldm_ok,
           "seg_loss and ldm_loss gradients match central differences within 1e-3")


# --- 5: morphology properties ---

def test_criterion_5_morphology():
    rng = np.random.default_rng(2)
    ok = True
    for _ in range(100):
        m = (rng.random((3, 12, 12)) < 0.2).astype(np.uint8)
        ok = ok and bool(np.all(dilate_annotation(BinaryMask3D(m)).data >= m))
        pred = (rng.random((8, 8, 8)) < 0.25).astype(np.uint8)
        liver = (rng.random((8, 8, 8)) < 0.5).astype(np.uint8)
        out = postprocess_prediction(BinaryMask3D(pred), BinaryMask3D(liver))
        ok = ok and bool(np.all(out.data <= pred))
    # alpha=0 tumor masks are exact lattice ellipsoids
    liver = np.zeros((24, 24, 24), dtype=np.uint8)
    liver[6:18, 6:18, 6:18] = 1
    liver = BinaryMask3D(liver)
    for seed in range(20):
        r = float(np.random.default_rng(seed).uniform(1.5, 4.0))
        mask = sample_tumor_mask(liver, (r, r), ElasticParams(alpha=0.0), seed=seed)
        center = tuple(np.argwhere(mask.data).mean(axis=0))
        analytic = ellipsoid_mask((24, 24, 24), EllipsoidSpec(center, (r, r, r)))
        ok = ok and bool(np.array_equal(mask.data, analytic.data))
    report(5, ok, "dilation superset / postprocess subset over 100 masks; "
                  "alpha=0 masks equal analytic ellipsoid lattices (20 specs)")


# --- 6: inpainting compositing + global receptive field ---

def test_criterion_6_inpainting():
    rng = np.random.default_rng(3)
    shape = (8, 24, 24)
    phases = [Volume3D(rng.normal(80, 40, shape).astype(np.float32)) for _ in range(4)]
    tumor = np.zeros(shape, dtype=np.uint8)
    tumor[3:5, 10:14, 10:14] = 1
    liver = np.zeros(shape, dtype=np.uint8)
    liver[1:7, 6:18, 6:18] = 1
    case = MultimodalCase("a0", phases, BinaryMask3D(tumor), BinaryMask3D(liver))
    net = ncg.train_inpainter([case], ncg.FfcInpainterConfig(8, 1, 0.5, 1),
                              epochs=1, seed=0, steps_per_epoch=2, batch_size=2)
    ok = True
    for _ in range(50):
        x = rng.normal(0, 1, (16, 16)).astype(np.float32)
        m = (rng.random((16, 16)) < 0.3).astype(np.uint8)
        learned = ncg.inpaint_slice(net, x, m)
        median = ncg.median_inpaint_slice(x, m)
        ok = ok and bool(np.array_equal(learned[m == 0], x[m == 0]))
        ok = ok and bool(np.array_equal(median[m == 0], x[m == 0]))
    # one-pixel perturbation at a corner reaches the far corner through an FFC block
    torch.manual_seed(0)
    block = ncg.FfcBlock(8, 0.5)
    xin = torch.randn(1, 8, 32, 32)
    with torch.no_grad():
        base = block(xin)
        xin2 = xin.clone()
        xin2[0, 7, 0, 0] += 1.0
        delta = (block(xin2) - base).abs()
    ok = ok and float(delta[0, :, -1, -1].max()) > 0.0
    report(6, ok, "learned and median inpainters bit-exact outside the mask "
                  "(50 slices); corner perturbation reaches the far corner")


# --- 8: modality replication ---

def test_criterion_8_modality_replication():
    rng = np.random.default_rng(4)
    vols = [Volume3D(rng.normal(0, 1, (4, 4, 4)).astype(np.float32)) for _ in range(4)]
    a, b, c, d = (v.data for v in vols)
    patterns = {
        1: [a, a, a, a],
        2: [a, a, b, b],
        3: [a, a, b, c],
        4: [a, b, c, d],
    }
    ok = True
    for n, expected in patterns.items():
        out = ms.prepare_input(vols[:n])
        ok = ok and out.shape[0] == 4
        for ch in range(4):
            ok = ok and bool(np.array_equal(out[ch], expected[ch]))
    report(8, ok, "1/2/3/4-phase replication patterns exact")


# --- 9: tiny-profile end-to-end determinism ---

def test_criterion_9_determinism(tmp_path):
    t0 = time.time()
    artifacts = []
    for run in range(2):
        ws = tmp_path / f"run{run}"
        code = cli.main(["run-all", "--profile", "tiny", "--seed", "7",
                         "--workspace", str(ws)])
        assert code == 0
        manifest = yaml.safe_load((ws / "data" / "raw" / "manifest.yaml").read_text())
        metrics = (ws / "reports" / "metrics_hybrid.json").read_bytes()
        artifacts.append((manifest["dataset_hash"], metrics))
    same_hash = artifacts[0][0] == artifacts[1][0]
    same_metrics = artifacts[0][1] == artifacts[1][1]
    elapsed = time.time() - t0
    report(9, same_hash and same_metrics and elapsed <= 20 * 60,
           f"two tiny runs: dataset_hash equal={same_hash}, metric bytes "
           f"equal={same_metrics}, {elapsed:.0f}s")


# --- 7 & 10: desk-scale trend experiment (shared fixture) ---

DESK_SEEDS = (7, 8, 9)


def _run_desk_seed(seed):
    """One seed of the trend experiment; phantom/inpainter/synthesizer are
    shared between the two segmenter arms so only p_synth differs."""
    pcfg = phantom.PhantomConfig(grid=(64, 64, 64), n_cases=32, tumor_prob=0.9,
                                 misalign_voxels=3.0, seed=seed)
    cases = phantom.generate_dataset(pcfg)
    perm = np.random.default_rng(seed).permutation(len(cases))
    train = [cases[i] for i in perm[:24]]
    test = [cases[i] for i in perm[24:]]

    inp = ncg.train_inpainter(train, ncg.FfcInpainterConfig(base_channels=16, n_ffc_blocks=3),
                              epochs=4, seed=seed, steps_per_epoch=40, batch_size=8)
    normals = [ncg.generate_normal_case(inp, volumes.preprocess_case(c)) for c in train]

    mcfg = mcs.McsConfig()  # desk-scale defaults: f=4, T=100, 2000 AE + 20000 LDM steps
    ae, eps_net = mcs.train_mcs(train, normals, mcfg, seed)

    psnrs = []
    for c in test[:4]:
        pre = volumes.preprocess_case(c)
        for p in pre.phases[:2]:
            patch = p.data[16:48, 16:48, 16:48]
            rec = mcs.decode(ae, mcs.encode(ae, patch))
            psnrs.append(mcs.psnr(patch, rec))

    sched = mcs.make_schedule(mcfg.T, mcfg.beta_start, mcfg.beta_end)
    dsc = {}
    for tag, p_synth in (("hybrid", 0.5), ("real", 0.0)):
        stream = ms.hybrid_stream(
            train, normals if p_synth > 0 else [],
            ae if p_synth > 0 else None, eps_net if p_synth > 0 else None,
            sched if p_synth > 0 else None, p_synth, seed,
            patch=32, axes_range=(3.0, 7.0))
        torch.manual_seed(seed)
        net = ms.UNet3D(16)
        net = ms.train_segmenter(stream, net, ms.SegLossConfig(), steps=300,
                                 seed=seed, batch_size=2, epoch_steps=50)
        pairs = []
        for c in test:
            pre = volumes.preprocess_case(c)
            pred = ms.infer_volume(net, pre, patch=(32, 32, 32), overlap=0.25)
            pairs.append((c.case_id, pred.data, c.tumor_mask.data))
        dsc[tag] = evaluation.evaluate_cases(pairs).aggregate[0]
    return {"seed": seed, "psnr_mean": float(np.mean(psnrs)),
            "psnr_min": min(psnrs), **dsc}


@pytest.fixture(scope="module")
def desk_results():
    results = []
    for seed in DESK_SEEDS:
        t0 = time.time()
        r = _run_desk_seed(seed)
        r["seconds"] = round(time.time() - t0)
        print(f"\n[desk seed {seed}] {json.dumps(r)}")
        results.append(r)
    return results


def test_criterion_7_hybrid_trend(desk_results):
    hybrid = [r["hybrid"] for r in desk_results]
    real = [r["real"] for r in desk_results]
    med_h = statistics.median(hybrid)
    med_r = statistics.median(real)
    wins = sum(h > r for h, r in zip(hybrid, real))
    ok = (med_h >= med_r - 0.005) and wins >= 2
    report(7, ok, f"hybrid DSC median {med_h:.4f} vs real {med_r:.4f}; "
                  f"hybrid strictly better in {wins}/3 seeds")


def test_criterion_10_autoencoder_psnr(desk_results):
    means = [r["psnr_mean"] for r in desk_results]
    worst_mean = min(means)
    worst_patch = min(r["psnr_min"] for r in desk_results)
    report(10, worst_mean >= 25.0,
           f"held-out reconstruction PSNR mean {worst_mean:.2f} dB "
           f"(worst seed; per-patch min {worst_patch:.2f} dB)")
