"""Guided score composition, reverse Euler sampling and length prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .conditions import CONDITION_KINDS, ConditionSet
from .diffusion import NoiseSchedule, Vocab, check_grid
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .kernels import categorical


@dataclass(frozen=True)
class GuidanceWeights:
    w0: float = 1.9
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.6

    def __post_init__(self):
        for name in ("w0", "w1", "w2", "w3"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigError(f"guidance weight {name} must be finite")

    def for_kind(self, kind: str) -> float:
        # fixed mapping: w1 identity, w2 emotion, w3 text
        return {"identity": self.w1, "emotion": self.w2, "text": self.w3}[kind]

    def as_tuple(self):
        return (self.w0, self.w1, self.w2, self.w3)


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 96
    clamp: str = "clip"
    final_fill: str = "argmax"
    seed: int = 0

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError("n_steps must be a positive integer")
        if self.clamp != "clip":
            raise ConfigError(f"unknown clamp policy {self.clamp!r}")
        if self.final_fill != "argmax":
            raise ConfigError(f"unknown final-step policy {self.final_fill!r}")


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def epfg_log(ls_u, ls_cond, ls_joint, w0, wk):
    """Guided log score ``2 ls_u + w0 (ls_joint - ls_u) + sum_k wk (ls_k - ls_u)``."""
    ls_u = np.asarray(ls_u, dtype=np.float64)
    ls_joint = np.asarray(ls_joint, dtype=np.float64)
    if len(ls_cond) != len(wk):
        raise ShapeError(f"{len(ls_cond)} conditional fields but {len(wk)} weights")
    if ls_joint.shape != ls_u.shape:
        raise ShapeError("joint field shape differs from the unconditional one")
    out = 2.0 * ls_u + w0 * (ls_joint - ls_u)
    for lk, w in zip(ls_cond, wk):
        lk = np.asarray(lk, dtype=np.float64)
        if lk.shape != ls_u.shape:
            raise ShapeError("conditional field shape differs from the unconditional one")
        out = out + w * (lk - ls_u)
    return out


def epfg_compose(s_u, s_cond, s_joint, w, kinds=None):
    """Guided score field from positive score fields.

    ``w`` is a :class:`GuidanceWeights` (per-condition weights taken in
    ``kinds`` order, default identity/emotion/text) or a pair
    ``(w0, [w1, ..., wK])``.
    """
    fields = [s_u, s_joint, *s_cond]
    for f in fields:
        if np.any(np.asarray(f) <= 0):
            raise DomainError("score fields must be strictly positive")
    if isinstance(w, GuidanceWeights):
        kinds = kinds or CONDITION_KINDS[: len(s_cond)]
        w0, wk = w.w0, [w.for_kind(k) for k in kinds]
    else:
        w0, wk = w
    logs = [np.log(np.asarray(f, dtype=np.float64)) for f in fields]
    return np.exp(epfg_log(logs[0], logs[2:], logs[1], w0, list(wk)))


def compositional_log(ls_u, ls_cond):
    """Log of the product-of-ratios score ``s_u prod_k (s_k / s_u)``."""
    out = np.asarray(ls_u, dtype=np.float64).copy()
    for lk in ls_cond:
        out = out + (np.asarray(lk) - ls_u)
    return out


# ---------------------------------------------------------------------------
# reverse process
# ---------------------------------------------------------------------------


def conditional_rate(score, sigma, q_entry=1.0):
    """Reverse rate toward a candidate: ``score * sigma * Q(candidate -> current)``."""
    if np.any(np.asarray(score) <= 0):
        raise DomainError("scores must be positive")
    return np.asarray(score) * sigma * q_entry


def reverse_rates(grid, scores, sigma, vocab: Vocab):
    """Reverse rates ``(..., n_real + 1)`` per cell; the last slot is the diagonal.

    Masked cells move to real token ``y`` at rate ``sigma * s_y``; real
    tokens are frozen, so unmasked cells get all-zero rows.
    """
    g = np.asarray(grid)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != g.shape + (vocab.n_real,):
        raise ShapeError(f"scores shape {s.shape} does not match grid {g.shape}")
    masked = (g == vocab.mask_id)[..., None]
    off = np.where(masked, conditional_rate(s, sigma), 0.0)
    return np.concatenate([off, -off.sum(axis=-1, keepdims=True)], axis=-1)


def step_distribution(grid, log_scores, sigma, dt, mask_id):
    """Post-clamp categorical ``(..., n_real + 1)`` over (real tokens, MASK) for one Euler step.

    The first-order step puts ``dt * sigma * s_y`` on each real token and
    the remainder on staying masked.  When the jump mass exceeds one the
    stay probability clamps to zero and the jump weights renormalize.
    Unmasked cells get a point mass on their current token.
    """
    g = np.asarray(grid)
    ls = np.asarray(log_scores, dtype=np.float64)
    n_real = ls.shape[-1]
    lp = ls + math.log(sigma * dt)
    top = lp.max(axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(lp - top).sum(axis=-1))
    over = lse >= 0.0
    jump = np.where(over[..., None], np.exp(lp - lse[..., None]), np.exp(np.minimum(lp, 0.0)))
    stay = np.where(over, 0.0, -np.expm1(np.minimum(lse, 0.0)))
    probs = np.concatenate([jump, stay[..., None]], axis=-1)
    frozen = g != mask_id
    if np.any(frozen):
        point = np.zeros_like(probs)
        np.put_along_axis(point, np.where(frozen, g, n_real)[..., None], 1.0, axis=-1)
        probs = np.where(frozen[..., None], point, probs)
    return probs


def euler_step(grid, t, dt, scores, rng, schedule: NoiseSchedule | None = None, vocab: Vocab | None = None, log_domain=False):
    """One reverse step from ``t`` to ``t - dt``; returns ``(new_grid, step_probs)``.

    ``scores`` are positive scores, or log scores if ``log_domain``.  One
    uniform is drawn per cell, in C order, whether or not the cell is masked.
    """
    schedule = schedule or NoiseSchedule()
    if not 0.0 < dt <= t + 1e-12:
        raise DomainError(f"need 0 < dt <= t, got dt={dt}, t={t}")
    s = np.asarray(scores, dtype=np.float64)
    vocab = vocab or Vocab(s.shape[-1])
    g = check_grid(grid, vocab)
    if s.shape != g.shape + (vocab.n_real,):
        raise ShapeError(f"scores shape {s.shape} does not match grid {g.shape}")
    if log_domain:
        ls = s
    else:
        if np.any(s <= 0):
            raise DomainError("scores must be positive")
        ls = np.log(s)
    probs = step_distribution(g, ls, float(schedule.sigma(t)), dt, vocab.mask_id)
    if not np.all(np.isfinite(probs)) or np.any(probs.sum(axis=-1) <= 0):
        raise NumericError("degenerate reverse-step distribution")
    u = rng.random(g.shape)
    draw = categorical(probs.reshape(-1, vocab.n_real + 1), u.reshape(-1)).reshape(g.shape)
    out = np.where(draw == vocab.n_real, vocab.mask_id, draw)
    return np.where(g == vocab.mask_id, out, g), probs


def _evaluations(cond: ConditionSet, weights: GuidanceWeights | None):
    """Condition sets to evaluate: unconditional, each present condition, joint."""
    if weights is None or cond is None or cond.all_null:
        return [ConditionSet()], []
    kinds = [k for k in CONDITION_KINDS if not cond.is_null(k)]
    return [ConditionSet()] + [cond.only(k) for k in kinds] + [cond], kinds


def sample(model, cond: ConditionSet | None, length: int, levels: int, weights: GuidanceWeights | None = None,
           cfg: SamplerConfig | None = None, n: int = 1, schedule: NoiseSchedule | None = None, trace=None):
    """Reverse-sample ``n`` grids ``(n, levels, length)`` from the all-MASK state.

    With ``weights`` and at least one non-null condition, every step
    evaluates the model unconditionally, once per present condition, and
    jointly, then composes the fields; otherwise the unconditional score is
    used as is.  ``trace``, if a list, receives the masked-cell count of
    every chain after each step.
    """
    cfg = cfg or SamplerConfig()
    schedule = schedule or NoiseSchedule()
    if length < 1 or levels < 1:
        raise DomainError("length and levels must be positive")
    if n < 1:
        raise DomainError("n must be positive")
    vocab = model.vocab
    rng = np.random.default_rng(cfg.seed)
    grid = np.full((n, levels, length), vocab.mask_id, dtype=np.int64)
    evals, kinds = _evaluations(cond, weights)
    wk = [weights.for_kind(k) for k in kinds] if kinds else []
    last = np.zeros((n, levels, length, vocab.n_real))
    dt = 1.0 / cfg.n_steps
    want = (levels, length, vocab.n_real)
    for i in range(cfg.n_steps):
        t = 1.0 - i * dt
        active = np.flatnonzero((grid == vocab.mask_id).any(axis=(1, 2)))
        if active.size:
            sub = grid[active]
            fields = []
            for c in evals:
                ls = np.asarray(model.log_scores(sub, t, c), dtype=np.float64)
                if ls.shape != (len(sub),) + want:
                    raise ShapeError(f"model returned scores of shape {ls.shape}, expected {(len(sub),) + want}")
                fields.append(ls)
            if kinds:
                ls = epfg_log(fields[0], fields[1:-1], fields[-1], weights.w0, wk)
            else:
                ls = fields[0]
            if not np.all(np.isfinite(ls)):
                raise NumericError("non-finite guided score")
            last[active] = ls
            new, _ = euler_step(sub, t, min(dt, t), ls, rng, schedule, vocab, log_domain=True)
            grid[active] = new
        if trace is not None:
            trace.append((grid == vocab.mask_id).sum(axis=(1, 2)).copy())
    left = grid == vocab.mask_id
    if np.any(left):
        grid = np.where(left, last.argmax(axis=-1), grid)
    return grid


# ---------------------------------------------------------------------------
# length prediction
# ---------------------------------------------------------------------------


def predict_length(text, model) -> int:
    """Sum per-symbol durations and round to the nearest positive integer."""
    text = list(text)
    if not text:
        raise DomainError("empty symbol sequence")
    per = np.asarray(model.durations(text), dtype=np.float64)
    if np.any(per < 0) or not np.all(np.isfinite(per)):
        raise NumericError("durations must be finite and nonnegative")
    return max(1, int(math.floor(per.sum() + 0.5)))


class DurationModel:
    """Per-symbol duration regressor: embedding, linear layer, softplus output."""

    def __init__(self, alphabet: int, hidden: int = 8, params=None, seed: int = 0):
        self.alphabet = alphabet
        self.hidden = hidden
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "emb": rng.standard_normal((alphabet, hidden)),
                "w": rng.standard_normal((hidden, 1)) / math.sqrt(hidden),
                "b": np.zeros(1),
            }
        self.params = params

    def _forward(self, idx, P):
        h = ad.take(P["emb"], idx)
        z = ad.add(ad.matmul(h, P["w"]), P["b"])
        # softplus(z) = log(1 + exp(z))
        return ad.log(ad.add(ad.exp(z), 1.0))

    def durations(self, text):
        idx = np.asarray(text, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= self.alphabet:
            raise DomainError("symbol outside the alphabet")
        P = {k: ad.Tensor(v) for k, v in self.params.items()}
        return self._forward(idx, P).data[:, 0]

    def fit(self, texts, totals, steps=500, lr=0.05, seed=0):
        """Least-squares fit of summed durations to observed totals."""
        from .training import AdamW

        T = max(len(t) for t in texts)
        idx = np.zeros((len(texts), T), dtype=np.int64)
        valid = np.zeros((len(texts), T, 1))
        for i, t in enumerate(texts):
            idx[i, : len(t)] = t
            valid[i, : len(t)] = 1.0
        y = np.asarray(totals, dtype=np.float64)[:, None]
        opt = AdamW(lr=lr, weight_decay=0.0)
        for _ in range(steps):
            P = {k: ad.param(v, k) for k, v in self.params.items()}
            per = ad.mul(self._forward(idx, P), valid)
            err = ad.add(ad.tsum(per, axis=1), -y)
            loss = ad.mean(ad.mul(err, err))
            loss.backward()
            opt.step(self.params, {k: P[k].grad for k in P})
        return self
