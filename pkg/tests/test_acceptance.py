"""End-to-end acceptance checks, one test per criterion.

Each test records a verdict line printed in the pytest terminal summary.
"""
import io
import json
import statistics

import numpy as np
import pytest

from sadconv.dataio import SynthConfig, shadow_fraction_mask, synth_triplets
from sadconv.metrics import psnr, region_rmse_lab, rgb_to_lab, ssim
from sadconv.objective import StandInExtractor, gradient_loss, intra_distill_loss, perceptual_loss, total_loss
from sadconv.perf import BenchConfig, benchmark, count_macs_instrumented, flops_from_mask, flops_model
from sadconv.sadc import SadcBlock, SadcNet, net_forward, sadc_test_forward, sadc_train_forward
from sadconv.tensor import GradTape
from sadconv.trainer import TrainConfig, evaluate, evaluate_identity, fit, training_loss

from oracles import central_difference, rel_error


@pytest.mark.criterion(1)
def test_phase_equivalence_on_random_configurations(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        c = int(rng.choice([4, 8, 16]))
        h, w = (int(v) for v in rng.choice([16, 32, 64], size=2))
        block = SadcBlock(c, 3, rng=rng)
        for t in block.parameters():
            if t.ndim == 1:
                t.data = (rng.standard_normal(t.shape) * 0.3).astype(np.float32)
        x = rng.standard_normal((1, c, h, w)).astype(np.float32)
        if i % 2:
            m = rng.random((h, w)) < rng.uniform(0.0, 0.6)
        else:
            m = shadow_fraction_mask(h, w, rng.uniform(0.05, 0.6))
        mode = ("whole", "split")[i % 3 == 0]
        diff = np.abs(sadc_test_forward(block, x, m, mode).data - sadc_train_forward(block, x, m, mode).data).max()
        worst = max(worst, float(diff))
    verdict(worst <= 1e-4, f"max |test - train| over 100 configs = {worst:.3g} (<= 1e-4)")


@pytest.mark.criterion(2)
def test_reduced_halo_breaks_equivalence(verdict):
    k, c, size = 3, 3, 17
    block = SadcBlock(c, k, rng=np.random.default_rng(0))
    for cw in block.shadow_convs:
        cw.weight.data = np.abs(cw.weight.data)
    x = np.zeros((1, c, size, size), np.float32)
    centre = size // 2
    x[0, :, centre, centre + k - 1] = 100.0  # reachable only through the outer ring of the 2K-1 halo
    m = np.zeros((size, size), bool)
    m[centre, centre] = True
    exact = sadc_train_forward(block, x, m).data
    full = np.abs(sadc_test_forward(block, x, m).data - exact).max()
    reduced = np.abs(sadc_test_forward(block, x, m, halo=2 * k - 3).data - exact).max()
    verdict(full <= 1e-4 and reduced > 1e-2,
            f"halo 2K-1 error {full:.3g}; halo 2K-3 error {reduced:.3g} (> 1e-2)")


@pytest.mark.criterion(3)
def test_flops_model_and_instrumentation(verdict):
    gamma = flops_model(0.9, 64, 256, 256, 3).gamma_exact
    gaps_ok = all(abs(flops_model(rho, c, 32, 32, 3).gamma_exact - (2 * rho - 1)) <= rho / c + 1e-12
                  for rho in np.linspace(0, 1, 21) for c in (8, 16, 32, 64, 128, 256, 512))
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(20):
        block = SadcBlock(8, 3, rng=rng)
        m = rng.random((24, 20)) < rng.uniform(0, 0.5)
        mismatches += count_macs_instrumented(block, m) != flops_from_mask(m, 8, 3).macs_sadc
    ok = abs(gamma - 0.7859) <= 1e-4 and gaps_ok and mismatches == 0
    verdict(ok, f"gamma(0.9, 64) = {gamma:.6f}; gap <= rho/C: {gaps_ok}; instrumented mismatches: {mismatches}/20")


@pytest.mark.criterion(4)
def test_measured_speedup(verdict):
    speedups = {rho: benchmark(BenchConfig(rho=rho, C=64, H=256, W=256, K=3, reps=30, warmup=3)).speedup
                for rho in (0.3, 0.6, 0.9)}
    monotone = speedups[0.3] < speedups[0.6] < speedups[0.9]
    text = ", ".join(f"rho={r}: {s:.2f}x" for r, s in speedups.items())
    verdict(speedups[0.9] >= 1.5 and monotone, f"{text} (need >= 1.5x at 0.9, strictly increasing)")


@pytest.mark.criterion(5)
def test_full_objective_gradients(verdict):
    rng = np.random.default_rng(11)
    net = SadcNet(3, 2, init="random", seed=3, dtype=np.float64)
    for p in net.parameters():
        p.data *= 0.5
        if p.ndim == 1:
            p.data = rng.standard_normal(p.shape) * 0.1
    size = 12
    x = rng.uniform(0.1, 0.9, (2, 3, size, size))
    y = rng.uniform(0.1, 0.9, (2, 3, size, size))
    m = np.stack([shadow_fraction_mask(size, size, 0.2), np.roll(shadow_fraction_mask(size, size, 0.3), 2, 1)])
    cfg = TrainConfig(channels=3, n_blocks=2, kappa=5)
    extractor = StandInExtractor(seed=0)
    params = net.named_parameters()

    with GradTape() as tape:
        total, parts = training_loss(net, x, m, y, cfg, lam2=1.0, extractor=extractor)
    analytic = tape.gradient(total, list(params.values()))

    # the teacher side of the distillation term is a constant for the gradient, so the
    # numeric oracle holds each block's non-shadow features at their base values
    _, branches = net_forward(net, x, m, return_branches=True)
    teachers = [x_ns.data.copy() for _, x_ns in branches]

    def frozen_teacher_loss():
        out, branches = net_forward(net, x, m, return_branches=True)
        intra = [intra_distill_loss(x_s, t, m, cfg.kappa) for (x_s, _), t in zip(branches, teachers)]
        return total_loss(perceptual_loss(extractor, out, y), gradient_loss(out, y), intra, 1.0, 1.0).item()

    same_value = frozen_teacher_loss() == pytest.approx(total.item(), rel=1e-12)
    numeric = central_difference(frozen_teacher_loss, [p.data for p in params.values()], h=1e-6)
    errors = {name: rel_error(a, n) for name, a, n in zip(params, analytic, numeric)}
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-3 and parts["intra"] > 0 and same_value
    verdict(ok, f"{len(errors)} tensors, worst rel error {errors[worst]:.2e} ({worst}); intra = {parts['intra']:.3g}")


@pytest.mark.criterion(6)
def test_loss_schedule_contract(verdict):
    data = synth_triplets(SynthConfig(seed=0, size=16), 2)
    finals, ramp = {}, None
    for schedule in ("constant", "warmup-constant", "warmup-ramp"):
        log = io.StringIO()
        _, history = fit(TrainConfig(epochs=300, batch_size=2, channels=3, n_blocks=1, schedule=schedule), data, log)
        finals[schedule] = all(np.isfinite(r["loss"]) for r in history) and len(history) == 300
        if schedule == "warmup-ramp":
            ramp = [json.loads(line)["lambda2"] for line in log.getvalue().splitlines()]
    ramp_ok = all(v == 0 for v in ramp[:50]) and ramp[51] > 0 and ramp[-1] == 1
    verdict(ramp_ok and all(finals.values()),
            f"lambda2 zero for epochs 0-49: {ramp_ok}, final = {ramp[-1]}; 300 finite epochs: {finals}")


# Toy efficacy protocol: the same data, schedule and budget for every arm.
EFFICACY = dict(epochs=12, batch_size=8, lr=2e-3, lr_schedule="cosine", warmup_epochs=3)
ARMS = {"shared-conv": dict(arm="shared-conv", use_intra=False),
        "sadc-no-intra": dict(arm="sadc", use_intra=False),
        "sadc": dict(arm="sadc", use_intra=True)}


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_toy_efficacy(verdict):
    train = synth_triplets(SynthConfig(seed=0, size=64), 256)
    test = synth_triplets(SynthConfig(seed=1000, size=64), 64)
    baseline = evaluate_identity(test)["shadow"]["rmse"]
    scores = {arm: [] for arm in ARMS}
    for seed in (0, 1, 2):
        for arm, kw in ARMS.items():
            net, _ = fit(TrainConfig(seed=seed, **EFFICACY, **kw), train)
            scores[arm].append(evaluate(net, test)["shadow"]["rmse"])
    med = {arm: statistics.median(v) for arm, v in scores.items()}
    reduction = 1 - med["sadc"] / baseline
    a = reduction >= 0.5
    b = med["sadc"] < med["shared-conv"]
    c = med["sadc"] <= 1.02 * med["sadc-no-intra"]
    runs = "; ".join(f"{arm} {[round(s, 3) for s in v]}" for arm, v in scores.items())
    verdict(a and b and c,
            f"input {baseline:.2f}; medians sadc {med['sadc']:.3f}, no-intra {med['sadc-no-intra']:.3f}, "
            f"shared {med['shared-conv']:.3f}; (a) -{reduction:.0%} {a} (b) {b} (c) {c} | {runs}")


@pytest.mark.criterion(8)
def test_metric_sanity(verdict):
    gt = np.random.default_rng(0).uniform(0.1, 0.8, (3, 32, 32))
    p = psnr(gt + 0.1, gt)
    s = ssim(np.full((3, 16, 16), 0.2), np.full((3, 16, 16), 0.4))
    white = rgb_to_lab(np.ones((3, 1, 1))).ravel()
    m = np.zeros((32, 32), bool)
    m[8:20, 8:20] = True
    pred = gt.copy()
    pred[:, m] += 0.1
    ns = region_rmse_lab(pred, gt, m, "non-shadow")
    ok = abs(p - 20) <= 0.01 and abs(s - 0.8002) <= 1e-3 and np.abs(white - [100, 0, 0]).max() <= 1e-3 and ns == 0
    verdict(ok, f"psnr {p:.4f} dB; ssim {s:.5f}; white lab {np.round(white, 5).tolist()}; non-shadow rmse {ns}")


@pytest.mark.criterion(9)
def test_determinism(verdict, tmp_path):
    from sadconv.cli import run

    logs = []
    for i in range(2):
        log = tmp_path / f"log{i}.jsonl"
        argv = ["--threads", "1", "train", "--synth-seed", "0", "--synth-n", "8", "--size", "32", "--epochs", "3",
                "--batch-size", "4", "--warmup-epochs", "1", "--crop", "24", "--out-checkpoint",
                str(tmp_path / f"c{i}.ckpt"), "--log", str(log)]
        assert run(argv) == 0
        logs.append(log.read_bytes())
    same_log = logs[0] == logs[1] and len(logs[0]) > 0
    dirs = []
    for name in ("a", "b"):
        assert run(["synth", "--out", str(tmp_path / name), "--n", "5", "--seed", "9", "--size", "32"]) == 0
        dirs.append(tmp_path / name)
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*.png"))
    same_synth = len(files) == 15 and all((dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in files)
    verdict(same_log and same_synth, f"train logs identical: {same_log}; synth files identical: {same_synth}")
