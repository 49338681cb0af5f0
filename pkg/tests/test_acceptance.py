"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line straight to the terminal, then
asserts.  The training-based checks are slow (tens of minutes in total on a
single CPU core).
"""
import time

import numpy as np
import pytest

from gdip.block import GdipConfig, GbModule, gdip_forward
from gdip.cli import bench_latencies, main as cli_main
from gdip.datagen import (FOG_LEVELS, FogParams, choose_condition,
                          condition_group, hybrid_batches, load_dataset, sample_dark,
                          transmission, write_dataset)
from gdip.detect import Detection, Target
from gdip.gradcheck import run_suite
from gdip.ipops import ALL_KINDS, PARAM_COUNTS, IpKind
from gdip.metrics import average_precision, corners_to_box, iou, psnr, tp_fp_fn_curves
from gdip.model import gate_values, predict, strip_regularizer
from gdip.tensor import count_ops
from gdip.trainer import TrainConfig, train

pytestmark = pytest.mark.acceptance

# shared by the efficacy and regularizer runs
FOG_TRAIN, FOG_VAL, SIZE, EPOCHS = 500, 100, 96, 15
OPTIM = dict(lr_max=0.01, momentum=0.9, batch_size=6)


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def fog_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("fog")
    write_dataset(root / "train", FOG_TRAIN, "fog", seed=1, size=SIZE)
    write_dataset(root / "val", FOG_VAL, "fog", seed=2, size=SIZE)
    return load_dataset(root / "train", SIZE), load_dataset(root / "val", SIZE)


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    reports = run_suite("all")
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    verdict("gradient suite", not failed and elapsed < 120,
            f"{len(reports)} checks, worst rel err {worst:.2e}, {elapsed:.0f}s, failed={failed}")


def _forced(ops, pre, rng, emb=4):
    mods = []
    for kind, s in zip(ops, pre):
        n = PARAM_COUNTS[IpKind.parse(kind)] + 1
        w = rng.uniform(-0.3, 0.3, (n, emb))
        w[-1] = 0.0
        b = np.zeros(n)
        b[-1] = s
        mods.append(GbModule(kind, w, b))
    return mods


def test_ablation_modes(verdict):
    rng = np.random.default_rng(7)
    img = rng.uniform(0.05, 0.95, (10, 10, 3))
    e = rng.normal(size=4)
    ops = [k.value for k in ALL_KINDS]
    errs = []
    for active in range(len(ops)):
        pre = np.full(len(ops), -40.0)
        pre[active] = 40.0
        mods = _forced(ops, pre, np.random.default_rng(active))
        full = gdip_forward(GdipConfig(ops=ops, embedding_dim=4), mods, img, e)[0]
        mx = gdip_forward(GdipConfig(ops=ops, mode="Max", embedding_dim=4), mods, img, e)[0]
        errs.append(np.max(np.abs(full - mx)))
    max_equal = max(errs) <= 1e-9

    nog = GdipConfig(ops=ops, mode="NoGates", embedding_dim=4)
    a = gdip_forward(nog, _forced(ops, rng.normal(size=7), np.random.default_rng(1)), img, e)[0]
    b = gdip_forward(nog, _forced(ops, rng.normal(size=7) * 5, np.random.default_rng(1)), img, e)[0]
    nog_invariant = np.array_equal(a, b)

    # identity and gamma outputs span different ranges, so inner normalization matters
    dark = rng.uniform(0.2, 0.6, (10, 10, 3))
    # gamma raw 1.0 gives gamma = 3 ** tanh(1), about 2.3
    mods = [GbModule("I", np.zeros((1, 4)), np.array([0.3])),
            GbModule("G", np.zeros((2, 4)), np.array([1.0, -0.2]))]
    z_f = gdip_forward(GdipConfig(ops=("I", "G"), embedding_dim=4), mods, dark, e)[0]
    z_u = gdip_forward(GdipConfig(ops=("I", "G"), mode="Unnormalized", embedding_dim=4),
                       mods, dark, e)[0]
    diff = float(np.max(np.abs(z_f - z_u)))
    verdict("ablation modes", max_equal and nog_invariant and diff > 1e-6,
            f"Full vs Max max err {max(errs):.1e}, NoGates invariant={nog_invariant}, "
            f"Unnormalized vs Full diff {diff:.3e}")


def test_metric_oracles(verdict):
    i = iou(corners_to_box(0, 0, 2, 2), corners_to_box(1, 1, 3, 3))
    gt = [Target([[0.2, 0.2, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], [0, 0])]
    dets = [[Detection((0.2, 0.2, 0.2, 0.2), 0, 0.9), Detection((0.45, 0.2, 0.2, 0.2), 0, 0.8),
             Detection((0.7, 0.7, 0.2, 0.2), 0, 0.7)]]
    ap = average_precision(dets, gt)
    rng = np.random.default_rng(0)
    gts, dd = [], []
    for _ in range(20):
        boxes = rng.uniform(0.1, 0.9, (3, 4)) * [1, 1, 0.3, 0.3]
        gts.append(Target(boxes, rng.integers(0, 3, 3)))
        dd.append([Detection(tuple(b + rng.normal(0, 0.02, 4)), int(c), float(rng.uniform()))
                   for b, c in zip(boxes, rng.integers(0, 3, 3))])
    conserved = all(r["tp"] + r["fn"] == 60 for r in tp_fp_fn_curves(dd, gts))
    p = psnr(np.full((4, 4, 3), 0.3), np.full((4, 4, 3), 0.2))
    ok = i == 1 / 7 and abs(ap - 0.8333) <= 1e-4 and conserved and abs(p - 20.0) <= 1e-9
    verdict("metric oracles", ok,
            f"IoU {i!r}, AP {ap:.6f}, TP+FN conserved={conserved}, PSNR {p:.12f}")


def test_enhancement_efficacy(verdict, fog_data, tmp_path):
    t0 = time.perf_counter()
    common = dict(epochs=EPOCHS, image_size=SIZE, aux_reconstruction=False, **OPTIM)
    g = train(TrainConfig(variant="gdip", run_dir=str(tmp_path / "gdip"), **common), fog_data)
    b = train(TrainConfig(variant="baseline", run_dir=str(tmp_path / "base"), **common), fog_data)
    elapsed = time.perf_counter() - t0
    val = fog_data[1]
    fog_psnr = float(np.mean([psnr(x, c) for x, c in zip(val.images, val.clears)]))
    gm, bm, gp = g.final["val_map"], b.final["val_map"], g.final["val_psnr"]
    ok = gm - bm >= 0.05 and gp - fog_psnr >= 2.0 and elapsed <= 1800
    verdict("enhancement efficacy", ok,
            f"mAP gdip {gm:.3f} vs baseline {bm:.3f} (need +0.05); PSNR enhanced {gp:.2f} dB "
            f"vs fogged {fog_psnr:.2f} dB (need +2); {elapsed / 60:.1f} min")


GATE_RUN = dict(count=FOG_TRAIN, size=SIZE, epochs=EPOCHS)


def test_gate_pattern(verdict, tmp_path):
    s = GATE_RUN["size"]
    write_dataset(tmp_path / "train", GATE_RUN["count"], "mixed", seed=5, size=s)
    write_dataset(tmp_path / "val", 150, "mixed", seed=6, size=s)
    data = load_dataset(tmp_path / "train", s), load_dataset(tmp_path / "val", s)
    cfg = TrainConfig(variant="gdip", image_size=s, epochs=GATE_RUN["epochs"],
                      run_dir=str(tmp_path / "run"), **OPTIM)
    res = train(cfg, data)
    val = data[1]
    w = gate_values(cfg.model, res.params, val.images)
    groups = np.array([condition_group(t) for t in val.conditions])
    mean = {g: w[groups == g].mean(axis=0) for g in ("clear", "fog", "dark")}
    g_i, df_i = ALL_KINDS.index(IpKind.GAMMA), ALL_KINDS.index(IpKind.DEFOG)
    dg = mean["dark"][g_i] - mean["clear"][g_i]
    ddf = mean["fog"][df_i] - mean["clear"][df_i]
    verdict("gate pattern", dg >= 0.02 and ddf >= 0.02,
            f"Gamma dark-clear {dg:+.3f}, Defog fog-clear {ddf:+.3f} (need >= +0.02 each)")


REG_EPOCHS = EPOCHS


def test_regularizer(verdict, fog_data, tmp_path):
    common = dict(variant="regularizer", epochs=REG_EPOCHS, image_size=SIZE, **OPTIM)
    reg = train(TrainConfig(alpha=1e-4, run_dir=str(tmp_path / "reg"), **common), fog_data)
    ctl = train(TrainConfig(alpha=0.0, run_dir=str(tmp_path / "ctl"), **common), fog_data)
    base_cfg = TrainConfig(variant="baseline", image_size=SIZE).model
    reg_cfg = TrainConfig(**common).model
    stripped = strip_regularizer(reg.params)
    img = fog_data[1].images[:1]
    with count_ops() as c_reg:
        out_reg = predict(reg_cfg, reg.params, img)
    with count_ops() as c_base:
        out_base = predict(base_cfg, stripped, img)
    same_graph = c_reg == c_base and np.array_equal(out_reg, out_base)

    t_reg, t_base = bench_latencies([(reg_cfg, reg.params), (base_cfg, stripped)], 200)
    ratio = t_reg.mean() / t_base.mean()
    m_reg, m_ctl = reg.final["val_map"], ctl.final["val_map"]
    ok = same_graph and 0.98 <= ratio <= 1.02 and m_reg >= m_ctl
    verdict("regularizer variant", ok,
            f"op counts equal={same_graph} ({sum(c_reg.values())} ops), latency ratio "
            f"{ratio:.4f} over 200 iters, mAP alpha=1e-4 {m_reg:.3f} vs alpha=0 {m_ctl:.3f}")


def test_data_pipeline(verdict):
    rng = np.random.default_rng(0)
    draws = [choose_condition("mixed", rng) for _ in range(9000)]
    frac = np.mean([d != "clear" for d in draws])
    pool = [(np.full((4, 4, 3), 0.5), Target.empty())]
    stream = hybrid_batches(pool, "mixed", seed=3, batch_size=100)
    sampled = [s.adverse for _, batch in zip(range(90), stream) for s in batch]
    frac_sampler = float(np.mean(sampled))
    means = [transmission(96, 96, FogParams(level).beta).mean() for level in range(FOG_LEVELS)]
    decreasing = all(a > b for a, b in zip(means, means[1:]))
    gammas = [sample_dark(rng).gamma for _ in range(9000)]
    in_range = 1.5 <= min(gammas) and max(gammas) <= 5.0
    ok = abs(frac - 2 / 3) <= 0.02 and abs(frac_sampler - 2 / 3) <= 0.02 and decreasing and in_range
    verdict("data pipeline", ok,
            f"adverse fraction {frac:.4f} (choice) / {frac_sampler:.4f} (sampler), transmission "
            f"strictly decreasing={decreasing}, gamma range [{min(gammas):.3f}, {max(gammas):.3f}]")


def test_determinism(verdict, tmp_path):
    write_dataset(tmp_path / "data", 24, "mixed", seed=9, size=32)
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"train_data": "data", "val_data": "data", "image_size": 32, '
                   '"base_channels": 4, "embedding_dim": 16, "epochs": 3, "batch_size": 4, '
                   '"lr_max": 0.01, "momentum": 0.9, "seed": 3}')
    logs = []
    for name in ("a", "b"):
        assert cli_main(["train", "--config", str(cfg), "--override", f"run_dir={name}"]) == 0
        logs.append([(tmp_path / name / f).read_bytes() for f in ("log.csv", "steps.csv")])
    ok = logs[0] == logs[1]
    verdict("determinism", ok, f"log.csv and steps.csv bit-identical={ok}")
