"""Sample evaluation, guidance grid search and the oracle invariant suite."""

from __future__ import annotations

import itertools

import numpy as np

from .conditions import ConditionSet
from .diffusion import NoiseSchedule
from .errors import CapacityError, DomainError
from .guidance import GuidanceWeights, SamplerConfig, sample
from .oracle import (
    OracleScoreModel,
    dse_optimality_probe,
    exact_concrete_score,
    exact_marginal,
    exact_score_field,
    expected_dse,
    tv_distance,
)
from .synth import DatasetRecord, SynthConfig, classify, enumerate_toy_distribution


def eval_samples(records, synth_cfg: SynthConfig, toy=None) -> dict:
    """TV distance to the exact distribution (when enumerable) and per-condition label accuracy.

    ``toy`` is a precomputed :class:`ToyFamily`; ``None`` enumerates when the
    config allows it and ``False`` skips the distance.
    """
    if not records:
        raise DomainError("no samples to evaluate")
    tokens = np.stack([np.asarray(r.tokens) for r in records])
    if tokens.shape[1:] != (synth_cfg.levels, synth_cfg.length):
        raise DomainError(f"sample grids {tokens.shape[1:]} do not match the data config")
    report = {"n_samples": len(records), "tv_distance": None, "accuracy": {}}
    conds = {(r.identity, r.emotion, None if r.text is None else tuple(r.text)) for r in records}
    if toy is None:
        try:
            toy = enumerate_toy_distribution(synth_cfg)
        except CapacityError:
            toy = None
    if toy:
        target = toy.unconditional
        if len(conds) == 1:
            ident, emo, text = conds.pop()
            target = toy.conditional(ConditionSet(identity=ident, emotion=emo, text=text))
        report["tv_distance"] = tv_distance(tokens, target)
    pred = classify(synth_cfg, tokens)
    for kind in ("identity", "emotion"):
        rows = [i for i, r in enumerate(records) if getattr(r, kind) is not None]
        if rows:
            truth = np.array([getattr(records[i], kind) for i in rows])
            report["accuracy"][kind] = float(np.mean(pred[kind][rows] == truth))
    rows = [i for i, r in enumerate(records) if r.text is not None]
    if rows and synth_cfg.levels > 1:
        truth = np.array([records[i].text for i in rows])
        report["accuracy"]["text"] = float(np.mean(pred["text"][rows] == truth))
    return report


def condition_grid(synth_cfg: SynthConfig, seed=0):
    """One condition triplet per (identity, emotion) pair, text drawn per pair."""
    rng = np.random.default_rng([seed, 0x7E7])
    out = []
    for i, e in itertools.product(range(synth_cfg.n_identities), range(synth_cfg.n_emotions)):
        text = tuple(int(s) for s in rng.integers(synth_cfg.text_alphabet, size=synth_cfg.n_symbols))
        out.append(ConditionSet(identity=i, emotion=e, text=text))
    return out


def generate(model, conds, n_per, synth_cfg: SynthConfig, weights, steps, seed):
    """Sample ``n_per`` grids per condition and wrap them as records."""
    records = []
    for k, cond in enumerate(conds):
        grids = sample(model, cond, synth_cfg.length, synth_cfg.levels, weights,
                       SamplerConfig(n_steps=steps, seed=seed * 1000 + k), n=n_per)
        for g in grids:
            records.append(DatasetRecord(len(records), g, cond.identity, cond.emotion, cond.text, synth_cfg.length))
    return records


def guidance_accuracy(model, synth_cfg, weights, n_per=32, steps=96, seed=0, conds=None):
    conds = conds or condition_grid(synth_cfg, seed)
    recs = generate(model, conds, n_per, synth_cfg, weights, steps, seed)
    return eval_samples(recs, synth_cfg, toy=False)["accuracy"]


def grid_search(model, synth_cfg, ranges: dict, n_per=16, steps=96, seed=0):
    """Evaluate every weight combination; metrics are min-max normalized over the grid and averaged.

    Returns ``(rows, summary)``; each row has the weights, raw accuracies and
    the normalized score.  ``summary["w0_nondecreasing"]`` flags whether the
    best score per ``w0`` never drops as ``w0`` grows.
    """
    for key in ("w0", "w1", "w2", "w3"):
        if not ranges.get(key):
            raise DomainError(f"empty range for {key}")
    conds = condition_grid(synth_cfg, seed)
    rows = []
    for w0, w1, w2, w3 in itertools.product(ranges["w0"], ranges["w1"], ranges["w2"], ranges["w3"]):
        acc = guidance_accuracy(model, synth_cfg, GuidanceWeights(w0, w1, w2, w3), n_per, steps, seed, conds)
        rows.append({"w0": w0, "w1": w1, "w2": w2, "w3": w3, "metrics": acc})
    names = sorted(rows[0]["metrics"])
    for name in names:
        vals = np.array([r["metrics"][name] for r in rows])
        lo, hi = vals.min(), vals.max()
        for r, v in zip(rows, vals):
            r.setdefault("normalized", {})[name] = 1.0 if hi == lo else float((v - lo) / (hi - lo))
    for r in rows:
        r["score"] = float(np.mean(list(r["normalized"].values()))) if names else 0.0
    by_w0 = {}
    for r in rows:
        by_w0[r["w0"]] = max(by_w0.get(r["w0"], -np.inf), r["score"])
    ordered = [by_w0[k] for k in sorted(by_w0)]
    summary = {"w0_nondecreasing": bool(all(b >= a - 1e-12 for a, b in zip(ordered, ordered[1:]))), "cells": len(rows)}
    return rows, summary


# ---------------------------------------------------------------------------
# oracle invariant suite
# ---------------------------------------------------------------------------


def oracle_checks(synth_cfg: SynthConfig, trials=100, noise=0.3, chains=2000, steps=256, seed=0,
                  score_corruption=1.0, times=(0.25, 0.5, 0.75)):
    """Run the brute-force invariants on the enumerable instance of ``synth_cfg``.

    ``score_corruption`` scales the exact score used by the stationarity
    check; anything other than 1 is a negative control and should fail it.
    Returns a list of ``{"name", "passed", "value", "threshold"}`` dicts.
    """
    fam = enumerate_toy_distribution(synth_cfg)
    p0 = fam.unconditional
    schedule = NoiseSchedule()
    rng = np.random.default_rng([seed, 0x0C])
    out = []

    def record(name, passed, value, threshold):
        out.append({"name": name, "passed": bool(passed), "value": float(value), "threshold": threshold})

    record("toy_normalization", abs(p0.probs.sum() - 1.0) <= 1e-9, abs(p0.probs.sum() - 1.0), 1e-9)

    ident = fam.family("identity")
    mix = ident.mixture()
    dev = max(abs(mix.prob(x) - p) for x, p in zip(p0.support, p0.probs))
    record("mixture_equals_unconditional", dev <= 1e-12, dev, 1e-12)

    worst = 0.0
    for _ in range(20):
        x0 = p0.support[rng.choice(len(p0.probs), p=p0.probs)]
        t = float(rng.uniform(0.05, 0.95))
        xt = np.where(rng.random(x0.shape) < 0.5, synth_cfg.vocab.mask_id, x0)
        xt[0, 0] = synth_cfg.vocab.mask_id
        field = exact_score_field(p0, xt, t, schedule)
        for y in range(synth_cfg.n_real):
            worst = max(worst, abs(field[0, 0, y] - exact_concrete_score(p0, xt, t, 0, 0, y, schedule)))
    record("score_field_matches_marginal_ratio", worst <= 1e-9, worst, 1e-9)

    g_max = 0.0
    for t in times:
        _, g, _ = expected_dse(p0, t, lambda u, t=t: score_corruption * exact_score_field(p0, u, t, schedule), schedule)
        g_max = max(g_max, float(np.abs(g).max()))
    record("dse_stationarity", g_max <= 1e-8, g_max, 1e-8)

    probe = dse_optimality_probe(p0, trials=trials, noise=noise, seed=seed, times=times, schedule=schedule)
    record("dse_optimality_probe", probe["violations"] == 0, probe["violations"], 0)

    if chains:
        oracle = OracleScoreModel(p0)
        draws = sample(oracle, None, synth_cfg.length, synth_cfg.levels, None, SamplerConfig(n_steps=steps, seed=seed), n=chains)
        tv = tv_distance(draws, p0)
        # noise floor: the worst TV of exact i.i.d. draws of the same size, plus 0.05
        floor = max(tv_distance(p0.sample(rng, chains), p0) for _ in range(5))
        bound = floor + 0.05
        record("sampling_tv", tv <= bound, tv, float(bound))

    if synth_cfg.levels * synth_cfg.length <= 6:
        total = 0.0
        cells = synth_cfg.levels * synth_cfg.length
        alphabet = synth_cfg.n_real + 1
        t = 0.4
        for flat in itertools.product(range(alphabet), repeat=cells):
            total += exact_marginal(p0, np.array(flat).reshape(synth_cfg.levels, synth_cfg.length), t, schedule)
        record("marginal_normalization", abs(total - 1.0) <= 1e-9, abs(total - 1.0), 1e-9)
    return out
