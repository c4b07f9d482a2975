"""End-to-end acceptance checks, one test per criterion, each with its runtime budget."""

import time

import numpy as np
import pytest

from rvqdiff.cli import main
from rvqdiff.conditions import ConditionSet
from rvqdiff.config import DEFAULTS, MODEL_DEFAULTS
from rvqdiff.diffusion import NoiseSchedule, Vocab, forward_sample
from rvqdiff.evaluate import guidance_accuracy
from rvqdiff.guidance import GuidanceWeights, SamplerConfig, compositional_log, epfg_log, sample
from rvqdiff.models import MMDiT, MMDiTConfig
from rvqdiff.oracle import OracleScoreModel, dse_optimality_probe, expected_dse, exact_score_field, tv_distance
from rvqdiff.synth import SynthConfig, enumerate_toy_distribution, gen_dataset, gen_embedding_pairs, identity_anchors
from rvqdiff.training import (
    AlignConfig,
    TrainConfig,
    align_loss,
    condition_dropout,
    curriculum_level,
    dse_loss,
    fit_identity_encoder,
    mean_cosine,
    train,
)

pytestmark = pytest.mark.slow
SCHED = NoiseSchedule()


@pytest.fixture(scope="module")
def toy4():
    return enumerate_toy_distribution(SynthConfig(n_real=4, levels=2, length=3)).unconditional


def desk_model(synth, seed):
    cfg = MMDiTConfig(
        n_real=synth.n_real, max_levels=synth.levels, n_emotions=synth.n_emotions,
        text_vocab=synth.text_alphabet, id_dim=synth.embed_dim,
        **{k: v for k, v in MODEL_DEFAULTS.items() if k != "id_dim"},
    )
    return MMDiT(cfg, rng=np.random.default_rng([seed, 1]), identity_anchors=identity_anchors(synth))


def test_c01_forward_mask_fraction(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for t in (0.25, 0.5, 0.75):
        xt = forward_sample(np.zeros((1000, 4, 25), dtype=np.int64), t, rng, Vocab(4))
        worst = max(worst, abs(np.mean(xt == 4) - (1 - SCHED.eps) * t))
    took = time.perf_counter() - start
    verdict(1, worst <= 0.01 and took < 5, f"max |mask fraction - (1-eps)t| = {worst:.4f} (<= 0.01), {took:.2f}s (< 5s)")


def test_c02_oracle_stationarity(verdict, toy4):
    start = time.perf_counter()
    g_max = 0.0
    for t in (0.25, 0.5, 0.75):
        _, g, _ = expected_dse(toy4, t, lambda u, t=t: exact_score_field(toy4, u, t))
        g_max = max(g_max, float(np.abs(g).max()))
    took = time.perf_counter() - start
    verdict(2, g_max <= 1e-8 and took < 30, f"max |grad DSE| at exact score = {g_max:.2e} (<= 1e-8), {took:.1f}s (< 30s)")


def test_c03_dse_optimality_probe(verdict, toy4):
    start = time.perf_counter()
    rep = dse_optimality_probe(toy4, trials=100, noise=0.3)
    took = time.perf_counter() - start
    ok = rep["violations"] == 0 and rep["trials"] == 100 and took < 60
    verdict(3, ok, f"{rep['violations']} violations in 100 trials (min gap {rep['min_difference']:.3f}), {took:.1f}s (< 60s)")


def test_c04_sampling_fidelity(verdict):
    # the 64-sequence instance: 10^5 draws over 4096 states would carry ~0.08 TV of pure sampling noise
    p0 = enumerate_toy_distribution(SynthConfig(n_real=2, levels=2, length=3)).unconditional
    start = time.perf_counter()
    draws = sample(OracleScoreModel(p0), None, 3, 2, cfg=SamplerConfig(n_steps=256, seed=0), n=100_000)
    took = time.perf_counter() - start
    tv = tv_distance(draws, p0)
    verdict(4, tv <= 0.05 and took < 120, f"TV to exact distribution = {tv:.4f} (<= 0.05), {took:.1f}s (< 120s)")


def test_c05_epfg_algebra(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        lu, l1, l2, l3, lj = np.log(rng.uniform(0.01, 10.0, size=(5, 2, 4, 3)))
        w = rng.uniform(-2, 3, size=4)
        got = epfg_log(lu, [l1, l2, l3], lj, w[0], w[1:])
        want = 2 * lu + w[0] * (lj - lu) + w[1] * (l1 - lu) + w[2] * (l2 - lu) + w[3] * (l3 - lu)
        worst = max(worst, float(np.abs(got - want).max()))
    # dyadic log fields make every log-domain operation exact in floating point
    lu, l1, l2, l3, lj = rng.integers(-64, 64, size=(5, 2, 4, 3)) / 8.0
    exact = np.array_equal(epfg_log(lu, [l1, l2, l3], lj, 1.0, [1.0, 1.0, 1.0]), compositional_log(lu, [l1, l2, l3]) + lj)
    took = time.perf_counter() - start
    verdict(5, worst <= 1e-12 and exact and took < 5,
            f"affine deviation {worst:.1e} (<= 1e-12), compositional identity exact={exact}, {took:.2f}s (< 5s)")


def test_c06_gradient_check(verdict):
    start = time.perf_counter()
    cfg = MMDiTConfig(n_real=4, max_levels=2, n_blocks=1, hidden=8, n_heads=2, id_dim=4, text_dim=4, time_freqs=4)
    m = MMDiT(cfg, rng=np.random.default_rng(7), identity_anchors=np.eye(2, 4))
    rng = np.random.default_rng(8)
    x0 = rng.integers(4, size=(3, 2, 5))
    t = np.array([0.3, 0.6, 0.9])
    xt = forward_sample(x0, t, rng, m.vocab)
    conds = [ConditionSet(identity=0, emotion=1, text=(1, 2)), ConditionSet(text=(0, 3)), ConditionSet()]

    def total():
        return float(dse_loss(m.scores(xt, t, conds), x0, xt, t)[0].sum())

    _, g = dse_loss(m.scores(xt, t, conds), x0, xt, t)
    grads = m.backward(xt, t, conds, g)
    names = sorted(m.params)
    worst = 0.0
    for _ in range(200):
        name = names[rng.integers(len(names))]
        p = m.params[name]
        idx = tuple(int(rng.integers(n)) for n in p.shape)
        old = p[idx]
        p[idx] = old + 1e-3
        up = total()
        p[idx] = old - 1e-3
        down = total()
        p[idx] = old
        fd = (up - down) / 2e-3
        an = grads[name][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    took = time.perf_counter() - start
    verdict(6, worst <= 1e-4 and took < 60, f"max relative error over 200 parameters = {worst:.2e} (<= 1e-4), {took:.1f}s (< 60s)")


def test_c07_curriculum_schedule(verdict):
    for L in (1, 2, 4, 12):
        bad = [e for e in range(41) if curriculum_level(e, L) != min(L, 1 + e // 3)]
        if bad:
            break
    verdict(7, not bad, f"curriculum_level(e) = min(L, 1 + e // 3) for e in 0..40, L in (1, 2, 4, 12); mismatches {bad}")


def test_c08_curriculum_benefit(verdict):
    start = time.perf_counter()
    synth = SynthConfig()
    data = gen_dataset(synth, 512)
    val = gen_dataset(synth, 128, start=100_000)
    wins, pairs = 0, []
    for seed in range(3):
        vals = []
        for curriculum in (True, False):
            cfg = TrainConfig(lr=1e-3, epochs=3, curriculum=curriculum, seed=seed)
            res = train(desk_model(synth, seed), data, cfg, val)
            vals.append(res.metrics[2]["val_dse_per_level"][0])
        pairs.append(tuple(round(v, 3) for v in vals))
        wins += vals[0] < vals[1]
    took = time.perf_counter() - start
    verdict(8, wins >= 2 and took < 600,
            f"curriculum lower level-1 val DSE at epoch 2 in {wins}/3 seeds {pairs}, {took:.0f}s (< 600s)")


def test_c09_dropout_statistics(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    c = ConditionSet(identity=1, emotion=0, text=(2, 1))
    draws = [condition_dropout(c, rng) for _ in range(100_000)]
    all_null = float(np.mean([d.all_null for d in draws]))
    marg = [float(np.mean([d.is_null(k) for d in draws])) for k in ("identity", "emotion", "text")]
    took = time.perf_counter() - start
    ok = abs(all_null - 0.10) <= 0.01 and all(abs(m - 0.19) <= 0.01 for m in marg) and took < 5
    verdict(9, ok, f"all-null {all_null:.4f} (0.10 +- 0.01), per-slot {[round(m, 4) for m in marg]} (0.19 +- 0.01), {took:.2f}s (< 5s)")


def test_c10_alignment(verdict):
    start = time.perf_counter()
    synth = SynthConfig(face_noise=0.0, distortion=0.5, n_identities=8, embed_dim=32)
    pairs = gen_embedding_pairs(synth, 256)
    enc, hist = fit_identity_encoder([(p.face_view, p.speech_view) for p in pairs], AlignConfig(steps=500))
    held = gen_embedding_pairs(synth, 128, start=50_000)
    cos = mean_cosine(enc(np.stack([p.face_view for p in held])), np.stack([p.speech_view for p in held]))
    a = np.random.default_rng(0).standard_normal(32)
    zero = align_loss(a, a.copy())[0]
    took = time.perf_counter() - start
    verdict(10, cos >= 0.99 and zero == 0.0 and len(hist) <= 500 and took < 30,
            f"held-out mean cosine {cos:.4f} (>= 0.99) in {len(hist)} steps, align_loss(a, a) = {zero}, {took:.1f}s (< 30s)")


def test_c11_guidance_effect(verdict):
    start = time.perf_counter()
    synth = SynthConfig()
    model = desk_model(synth, 0)
    train(model, gen_dataset(synth, 2048), TrainConfig(lr=1e-3, epochs=24, seed=0), gen_dataset(synth, 128, start=100_000))
    trained = time.perf_counter() - start
    guided = guidance_accuracy(model, synth, GuidanceWeights(w0=1.9), n_per=64, steps=96)
    plain = guidance_accuracy(model, synth, GuidanceWeights(w0=0.0), n_per=64, steps=96)
    ok = guided["identity"] > plain["identity"] and guided["emotion"] > plain["emotion"] and trained <= 600
    verdict(11, ok, f"identity {plain['identity']:.3f} -> {guided['identity']:.3f}, emotion {plain['emotion']:.3f} -> "
                    f"{guided['emotion']:.3f} (w0 0 -> 1.9, w1..w3 = 1.0, 1.0, 1.6, 96 steps); text {plain['text']:.3f} -> "
                    f"{guided['text']:.3f} (not part of the criterion); training {trained:.0f}s (<= 600s)")


def test_c12_determinism(verdict, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 11\n[data]\nn_records = 96\nn_val = 16\nlength = 8\n[train]\nepochs = 5\nlr = 1e-3\n")
    data = tmp_path / "d.jsonl"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    base = ["train", "--config", str(cfg), "--data", str(data)]
    assert main(base + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(base + ["--out-dir", str(tmp_path / "b")]) == 0
    assert main(base + ["--out-dir", str(tmp_path / "k"), "--stop-after-epoch", "2"]) == 0
    assert main(base + ["--out-dir", str(tmp_path / "k"), "--resume"]) == 0
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    rerun = a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    resumed = a == (tmp_path / "k" / "metrics.jsonl").read_bytes()
    final = (tmp_path / "a" / "ckpt_0004.ckpt").read_bytes() == (tmp_path / "k" / "ckpt_0004.ckpt").read_bytes()
    verdict(12, rerun and resumed and final,
            f"rerun metrics identical={rerun}, kill-at-epoch-2 resume metrics identical={resumed}, final checkpoint identical={final}")
