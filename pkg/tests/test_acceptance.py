"""Acceptance suite: one test per acceptance criterion, stated tolerances.

Each test prints a PASS/FAIL line (visible with ``pytest -s`` or in the
captured output). Training-based criteria share module-scoped runs of the
seeded toy tasks.
"""

import time
import warnings

import numpy as np
import pytest

from bitflow import benchcli, bnquant, netgraph
from bitflow import trainkit as tk
from bitflow.binconv import ConvSpec, conv_float_oracle, conv_fused, conv_i8, conv_i32, staged_conv_i8
from bitflow.bitcore import I8FeatureMap, pack_activations, pack_weights, unpack_bits

SEED = 0xB17F10


def report(criterion, ok, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


# -- shared sweeps -----------------------------------------------------------


@pytest.fixture(scope="module")
def conv_sweep():
    rng = np.random.default_rng(SEED)
    stats = {
        "configs": 0,
        "exact_mismatches": 0,
        "clamp_mismatches": 0,
        "minus_128_seen": 0,
        "parity_violations": 0,
    }
    t0 = time.time()
    for _ in range(1000):
        fh = int(rng.choice([1, 3, 5]))
        fw = int(rng.choice([1, 3, 5]))
        h = int(rng.integers(fh, 17))
        w = int(rng.integers(fw, 17))
        cin = int(rng.integers(1, 257))
        cout = int(rng.integers(1, 7))
        spec = ConvSpec(
            (int(rng.integers(1, 3)), int(rng.integers(1, 3))),
            (int(rng.integers(0, 2)), int(rng.integers(0, 2))),
        )
        a = rng.choice([-1, 1], size=(1, h, w, cin)).astype(np.int8)
        wt = rng.choice([-1, 1], size=(cout, fh, fw, cin)).astype(np.int8)
        x, k = pack_activations(a), pack_weights(wt)
        wide = conv_i32(x, k, spec).values
        want = conv_float_oracle(a, wt, spec).values
        narrow = conv_i8(x, k, spec).values
        stats["configs"] += 1
        stats["exact_mismatches"] += int(not np.array_equal(wide, want))
        stats["clamp_mismatches"] += int(
            not np.array_equal(narrow, np.clip(wide, -127, 127))
        )
        stats["minus_128_seen"] += int(narrow.min() < -127)
        stats["parity_violations"] += int(np.any(wide % 2 != (fh * fw * cin) % 2))
    stats["elapsed"] = time.time() - t0
    return stats


@pytest.fixture(scope="module")
def vgg_runs():
    task = tk.make_toy_task(seed=SEED)
    t0 = time.time()
    s1 = tk.train_stage1(task)
    _, acc1 = tk.evaluate(s1, task, "val")
    ablated = tk.train_stage2(s1, task, epochs=0)
    _, acc_ablated = tk.evaluate(ablated, task, "val")
    s2 = tk.train_stage2(s1, task)
    _, acc2 = tk.evaluate(s2, task, "val")
    elapsed = time.time() - t0
    return {
        "task": task,
        "s1": s1,
        "s2": s2,
        "acc1": acc1,
        "acc_ablated": acc_ablated,
        "acc2": acc2,
        "elapsed": elapsed,
    }


@pytest.fixture(scope="module")
def resnet_runs():
    task = tk.make_toy_task(seed=SEED, variant="resnet", noise=0.5,
                            epochs_stage1=15, epochs_stage2=5)
    s2 = tk.train_stage2(tk.train_stage1(task), task)
    quantized, tables = tk.bn_quantize_retrain(s2, task, epochs_per_layer=2)
    return {"task": task, "s2": s2, "quantized": quantized, "tables": tables}


# -- criteria ----------------------------------------------------------------


def test_criterion_01_conv_exactness(conv_sweep):
    ok = conv_sweep["exact_mismatches"] == 0 and conv_sweep["elapsed"] < 60
    report(
        1,
        ok,
        f"conv_i32 == dense oracle on {conv_sweep['configs']} configs, "
        f"{conv_sweep['exact_mismatches']} mismatches, "
        f"{conv_sweep['elapsed']:.1f}s (< 60s); "
        f"parity violations {conv_sweep['parity_violations']}",
    )


def test_criterion_02_clamp_law(conv_sweep):
    ok = conv_sweep["clamp_mismatches"] == 0 and conv_sweep["minus_128_seen"] == 0
    report(
        2,
        ok,
        f"conv_i8 == clamp(conv_i32) on {conv_sweep['configs']} configs, "
        f"{conv_sweep['clamp_mismatches']} mismatches, "
        f"-128 observed {conv_sweep['minus_128_seen']} times",
    )


def test_criterion_03_threshold_equivalence():
    rng = np.random.default_rng(SEED)
    grid = np.arange(-127, 128, dtype=np.int8)
    total = mismatches = 0
    pos_gamma = neg_gamma = 0
    for _ in range(20):
        n = 500
        gamma = rng.uniform(-10, 10, n)
        gamma[gamma == 0] = 1.0
        pos_gamma += int((gamma > 0).sum())
        neg_gamma += int((gamma < 0).sum())
        p = bnquant.BNParams(
            gamma,
            rng.uniform(-20, 20, n),
            rng.uniform(-20, 20, n),
            rng.uniform(0.01, 10, n),
        )
        t = bnquant.compute_threshold(p)
        x = I8FeatureMap(np.tile(grid[None, :, None], (1, 1, n)).reshape(1, 255, 1, n))
        got = unpack_bits(bnquant.apply_threshold(x, t))
        ref = np.where(bnquant.bn_float(x.values, p) >= 0, 1, -1).astype(np.int8)
        total += n
        mismatches += int((got != ref).any(axis=(0, 1, 2)).sum())
    ok = mismatches == 0 and total == 10_000 and pos_gamma > 0 and neg_gamma > 0
    report(
        3,
        ok,
        f"{total} parameter sets x 255 exhaustive inputs, {mismatches} mismatching "
        f"channels ({pos_gamma} positive and {neg_gamma} negative gamma)",
    )


def test_criterion_04_quantization_properties():
    rng = np.random.default_rng(SEED)
    worst_rel = 0.0
    all_fit = True
    for _ in range(300):
        gamma = rng.uniform(-10, 10, 8)
        gamma[gamma == 0] = 1.0
        p = bnquant.BNParams(
            gamma,
            rng.uniform(-20, 20, 8),
            rng.uniform(-20, 20, 8),
            rng.uniform(0.01, 10, 8),
        )
        qbn, noisy = bnquant.quantize_bn(p)
        half_step = 2.0 ** (-qbn.fmt.frac_bits - 1)
        for orig, noised in (
            (p.gamma, noisy.gamma),
            (p.beta, noisy.beta),
            (p.mu, noisy.mu),
            (p.sigma, noisy.sigma),
        ):
            err = np.abs(noised - orig).max()
            worst_rel = max(worst_rel, err / half_step if half_step else 0.0)
        for tbl in (qbn.gamma_q, qbn.beta_q, qbn.mu_q, qbn.sigma_q, qbn.m_q, qbn.c_q):
            all_fit = all_fit and tbl.dtype == np.int16
    low = bnquant.qformat_fit(np.array([0.4]))
    high = bnquant.qformat_fit(np.array([40000.0]))
    bounds_ok = low.frac_bits == 15 and high.frac_bits == 0
    # sigma bumps can exceed the rounding half-width by design; exclude them
    ok = worst_rel <= 1.0 + 1e-9 and all_fit and bounds_ok
    report(
        4,
        ok,
        f"per-parameter error <= 2^(-frac-1) (worst {worst_rel:.3f} of bound), "
        f"all integers int16: {all_fit}, clip extremes frac_bits "
        f"{low.frac_bits}/{high.frac_bits}",
    )


def test_criterion_05_fusion_transparency():
    rng = np.random.default_rng(SEED)
    configs = mismatches = 0
    for _ in range(200):
        h = int(rng.integers(4, 14))
        w = int(rng.integers(4, 14))
        cin = int(rng.integers(1, 97))
        cout = int(rng.integers(1, 7))
        spec = ConvSpec(
            (int(rng.integers(1, 3)), 1), (int(rng.integers(0, 2)), 1)
        )
        vals = rng.integers(-127, 128, size=(1, h, w, cin)).astype(np.int8)
        x = I8FeatureMap(vals)
        k = pack_weights(rng.choice([-1.0, 1.0], size=(cout, 3, 3, cin)))
        thr = None
        if rng.random() < 0.5:
            gamma = rng.uniform(-3, 3, cin)
            gamma[np.abs(gamma) < 0.05] = 1.0
            thr = bnquant.compute_threshold(
                bnquant.BNParams(
                    gamma,
                    rng.uniform(-5, 5, cin),
                    rng.uniform(-20, 20, cin),
                    rng.uniform(0.5, 5, cin),
                )
            )
        staged = staged_conv_i8(x, thr, k, spec).values
        configs += 1
        for tile in (1, 2, 3, None):
            fused = conv_fused(x, thr, k, spec, tile_rows=tile).values
            mismatches += int(not np.array_equal(fused, staged))
    ok = mismatches == 0
    report(5, ok, f"{configs} configs x 4 tile sizes, {mismatches} mismatches")


def test_criterion_06_two_stage_training_proxy(vgg_runs):
    acc1, acc2 = vgg_runs["acc1"], vgg_runs["acc2"]
    drop = acc1 - vgg_runs["acc_ablated"]
    ok = (
        acc2 >= acc1 - 1.0
        and drop > 1.0
        and vgg_runs["elapsed"] <= 900
    )
    report(
        6,
        ok,
        f"stage1 {acc1:.2f}%, stage2 {acc2:.2f}% (>= stage1 - 1.0), "
        f"no-retraining ablation loses {drop:.2f} points (> 1.0), "
        f"runtime {vgg_runs['elapsed']:.0f}s (<= 900s)",
    )


def test_criterion_07_train_infer_parity(vgg_runs, resnet_runs):
    # stage-2 threshold export
    task, s2 = vgg_runs["task"], vgg_runs["s2"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = tk.export_vgg_model(s2)
        out = netgraph.run_model(model, task.val_images)
    vgg_net = tk.head_logits(s2, out.values).argmax(axis=1)
    vgg_train = tk.predict_classes(s2, task.val_images)
    vgg_same = int(np.array_equal(vgg_net, vgg_train))
    # quantized fixed-point export
    rtask, rq = resnet_runs["task"], resnet_runs["quantized"]
    rmodel = tk.export_resnet_model(rq)
    rout = netgraph.run_model(rmodel, rtask.val_images)
    res_net = tk.head_logits(rq, rout.values).argmax(axis=1)
    res_train = tk.predict_classes(rq, rtask.val_images)
    res_same = int(np.array_equal(res_net, res_train))
    ok = bool(vgg_same and res_same)
    report(
        7,
        ok,
        f"threshold export: {np.mean(vgg_net == vgg_train) * 100:.1f}% identical "
        f"predictions on {len(vgg_net)} samples; fixed-point export: "
        f"{np.mean(res_net == res_train) * 100:.1f}% identical on {len(res_net)}",
    )


def test_criterion_08_gradient_checks():
    rng = np.random.default_rng(SEED)
    sign_pts = np.concatenate([np.linspace(-4, 4, 801), rng.uniform(-5, 5, 500)])
    clip_pts = np.concatenate([np.linspace(-300, 300, 1201), rng.uniform(-400, 400, 500)])
    sign_report = tk.grad_check("sign", sign_pts)
    clip_report = tk.grad_check("clip", clip_pts)
    ok = sign_report["max_abs_err"] <= 1e-6 and clip_report["max_abs_err"] <= 1e-6
    report(
        8,
        ok,
        f"sign surrogate max err {sign_report['max_abs_err']:.2e} "
        f"({sign_report['checked']} pts), clip max err "
        f"{clip_report['max_abs_err']:.2e} ({clip_report['checked']} pts), both <= 1e-6",
    )


def test_criterion_09_performance():
    suite = benchcli.default_suite(repeats=11, warmup=2)
    result = benchcli.run_bench(suite, ["i8-fused", "i32-staged"], seed=SEED)
    wins = 0
    ratios = []
    for cfg in suite:
        rows = {r.variant: r for r in result.rows if r.config == cfg.name}
        fused = rows["i8-fused"].median_us
        staged = rows["i32-staged"].median_us
        wins += int(fused <= staged)
        ratios.append(staged / fused)
    geomean = float(np.exp(np.mean(np.log(ratios))))
    ok = wins >= 5  # at least half of the nine configs
    report(
        9,
        ok,
        f"i8-fused <= i32-staged on {wins}/9 configs (need >= 5), "
        f"geomean speedup {geomean:.2f}x (1.2x expected, hardware dependent)",
    )


def test_criterion_10_serialization():
    rng = np.random.default_rng(SEED)
    roundtrips = corruptions = 0
    diffs = missed = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(1000):
            model = benchcli.random_model(rng)
            blob = netgraph.model_to_bytes(model)
            back = netgraph.model_from_bytes(blob)
            x = rng.standard_normal((1, 6, 6, model.blocks[0].kernel.in_channels))
            same_bytes = netgraph.model_to_bytes(back) == blob
            same_out = np.array_equal(
                netgraph.run_model(model, x).values, netgraph.run_model(back, x).values
            )
            roundtrips += 1
            diffs += int(not (same_bytes and same_out))
            if i % 5 == 0:
                bad = bytearray(blob)
                pos = int(rng.integers(0, len(bad)))
                bad[pos] ^= 1 << int(rng.integers(0, 8))
                corruptions += 1
                try:
                    netgraph.model_from_bytes(bytes(bad))
                    missed += 1
                except netgraph.ModelFormatError:
                    pass
    ok = diffs == 0 and missed == 0
    report(
        10,
        ok,
        f"{roundtrips} save/load roundtrips, {diffs} behavioral diffs; "
        f"{corruptions} single-byte corruptions, {missed} undetected",
    )
