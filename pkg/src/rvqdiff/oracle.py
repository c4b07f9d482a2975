"""Brute-force ground truth on enumerable token spaces."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .conditions import ConditionSet
from .diffusion import NoiseSchedule, Vocab, check_grid
from .errors import CapacityError, DomainError, ShapeError
from .kernels import clean_posterior

ENUMERATION_CAP = 10**6
# exact scores that vanish are floored here before taking logs
SCORE_FLOOR = 1e-300


class ToyDistribution:
    """Explicit distribution over mask-free ``(L, d)`` grids."""

    def __init__(self, support, probs, vocab: Vocab):
        support = np.asarray(support, dtype=np.int64)
        probs = np.asarray(probs, dtype=np.float64)
        if support.ndim != 3 or support.shape[0] != probs.shape[0]:
            raise ShapeError("support must be (S, L, d) with one weight per entry")
        check_grid(support, vocab, allow_mask=False)
        if np.any(probs <= 0):
            raise DomainError("toy weights must be positive")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise DomainError(f"toy weights sum to {probs.sum()!r}, not 1")
        flat = support.reshape(len(support), -1)
        if len(np.unique(flat, axis=0)) != len(flat):
            raise DomainError("toy support entries must be unique")
        self.support = support
        self.probs = probs
        self.vocab = vocab
        self._index = {row.tobytes(): i for i, row in enumerate(flat)}

    @property
    def grid_shape(self):
        return self.support.shape[1:]

    @property
    def flat_support(self):
        return self.support.reshape(len(self.support), -1)

    def prob(self, grid) -> float:
        i = self._index.get(np.asarray(grid, dtype=np.int64).reshape(-1).tobytes())
        return 0.0 if i is None else float(self.probs[i])

    def sample(self, rng, n):
        idx = rng.choice(len(self.probs), size=n, p=self.probs)
        return self.support[idx]


@dataclass
class ConditionalFamily:
    """Condition-indexed components ``p0(. | c = v)`` with prior weights ``p(c = v)``."""

    components: dict
    prior: dict

    def mixture(self) -> ToyDistribution:
        acc = {}
        vocab = None
        for value, comp in self.components.items():
            vocab = comp.vocab
            w = self.prior[value]
            for row, p in zip(comp.support, comp.probs):
                key = row.tobytes()
                acc[key] = acc.get(key, (row, 0.0))
                acc[key] = (row, acc[key][1] + w * p)
        rows = np.stack([v[0] for v in acc.values()])
        probs = np.array([v[1] for v in acc.values()])
        return ToyDistribution(rows, probs / probs.sum(), vocab)

    def component(self, value) -> ToyDistribution:
        if value is None:
            return self.mixture()
        if value not in self.components:
            raise DomainError(f"unknown condition value {value!r}")
        return self.components[value]


def exact_marginal(p0: ToyDistribution, x_t, t, schedule: NoiseSchedule | None = None) -> float:
    """``sum_x0 p0(x0) prod_cells P(x_t cell | x0 cell)`` by direct enumeration."""
    schedule = schedule or NoiseSchedule()
    xt = check_grid(x_t, p0.vocab)
    if xt.shape != p0.grid_shape:
        raise ShapeError(f"x_t shape {xt.shape} != toy grid shape {p0.grid_shape}")
    m = float(schedule.mask_prob(t))
    masked = xt == p0.vocab.mask_id
    cell = np.where(masked[None], m, np.where(p0.support == xt[None], 1.0 - m, 0.0))
    return float(p0.probs @ cell.reshape(len(p0.probs), -1).prod(axis=1))


def exact_concrete_score(p0: ToyDistribution, x_t, t, position, level, candidate, schedule=None) -> float:
    """Ratio of exact marginals with ``candidate`` substituted at the masked cell."""
    xt = check_grid(x_t, p0.vocab)
    if xt[level, position] != p0.vocab.mask_id:
        raise DomainError("the queried cell is not masked")
    if not 0 <= candidate < p0.vocab.n_real:
        raise DomainError("candidate must be a real token")
    den = exact_marginal(p0, xt, t, schedule)
    if den == 0.0:
        raise DomainError("x_t has zero probability under the toy distribution")
    xh = xt.copy()
    xh[level, position] = candidate
    return exact_marginal(p0, xh, t, schedule) / den


def exact_conditional_score(family: ConditionalFamily, cond_value, x_t, t, position, level, candidate, schedule=None):
    return exact_concrete_score(family.component(cond_value), x_t, t, position, level, candidate, schedule)


def exact_score_field(p0: ToyDistribution, x_t, t, schedule: NoiseSchedule | None = None, floor=None):
    """All concrete scores for a batch ``(B, L, d)`` at once.

    Uses the absorbing-case factorization: the ratio at a masked cell is
    ``exp(-sb)/(1-exp(-sb))`` times the posterior of the clean token given
    the unmasked cells.  Unmasked cells get zeros (or ``floor``).
    """
    schedule = schedule or NoiseSchedule()
    xt = check_grid(x_t, p0.vocab)
    single = xt.ndim == 2
    if single:
        xt = xt[None]
    if xt.shape[1:] != p0.grid_shape:
        raise ShapeError(f"x_t shape {xt.shape[1:]} != toy grid shape {p0.grid_shape}")
    B = xt.shape[0]
    post, z = clean_posterior(p0.flat_support, p0.probs, xt.reshape(B, -1), p0.vocab.mask_id, p0.vocab.n_real)
    if np.any(z <= 0):
        raise DomainError("x_t has zero probability under the toy distribution")
    ratio = np.exp(schedule.log_ratio(t))
    ratio = np.asarray(ratio).reshape(-1, 1, 1) if np.ndim(ratio) else ratio
    s = (ratio * post).reshape(xt.shape + (p0.vocab.n_real,))
    if floor is not None:
        s = np.maximum(s, floor)
    return s[0] if single else s


def tv_distance(samples, p0: ToyDistribution) -> float:
    samples = np.asarray(samples)
    if samples.size == 0:
        raise DomainError("no samples")
    if np.any(samples == p0.vocab.mask_id):
        raise DomainError("samples must be mask-free")
    flat = samples.reshape(len(samples), -1)
    counts = Counter(row.tobytes() for row in flat)
    n = len(flat)
    tv = 0.0
    seen = set()
    for row, p in zip(p0.flat_support, p0.probs):
        key = row.tobytes()
        seen.add(key)
        tv += abs(counts.get(key, 0) / n - p)
    tv += sum(c / n for k, c in counts.items() if k not in seen)
    return 0.5 * tv


def forward_pairs(p0: ToyDistribution, t, schedule: NoiseSchedule | None = None):
    """Every ``(x0, x_t)`` pair with positive forward probability, with joint weights.

    Returns ``(x0, xt, w)`` of shapes ``(P, L, d)``, ``(P, L, d)``, ``(P,)``.
    """
    schedule = schedule or NoiseSchedule()
    L, d = p0.grid_shape
    cells = L * d
    if len(p0.probs) * 2**cells > 50 * ENUMERATION_CAP:
        raise CapacityError("too many (x0, x_t) pairs to enumerate")
    m = float(schedule.mask_prob(t))
    pats = ((np.arange(2**cells)[:, None] >> np.arange(cells)[None, :]) & 1).astype(bool)
    k = pats.sum(axis=1)
    pat_w = m**k * (1.0 - m) ** (cells - k)
    flat = p0.flat_support
    x0 = np.repeat(flat, len(pats), axis=0)
    xt = np.where(np.tile(pats, (len(flat), 1)), p0.vocab.mask_id, x0)
    w = np.repeat(p0.probs, len(pats)) * np.tile(pat_w, len(flat))
    return x0.reshape(-1, L, d), xt.reshape(-1, L, d), w


def expected_dse(p0, t, score_fn, schedule=None):
    """``E_{x0, x_t}[dse_loss(score_fn(x_t), x0, x_t)]`` and its gradient per unique ``x_t``.

    ``score_fn`` maps unique corrupted grids ``(U, L, d)`` to score fields.
    """
    from .training import dse_loss

    schedule = schedule or NoiseSchedule()
    x0, xt, w = forward_pairs(p0, t, schedule)
    flat = xt.reshape(len(xt), -1)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    uniq = uniq.reshape((-1,) + p0.grid_shape)
    s_u = score_fn(uniq)
    loss, grad = dse_loss(s_u[inv], x0, xt, t, schedule=schedule)
    g = np.zeros_like(s_u)
    np.add.at(g, inv, w[:, None, None, None] * grad)
    return float(w @ loss), g, uniq


def dse_statistics(p0: ToyDistribution, t, schedule: NoiseSchedule | None = None):
    """Sufficient statistics of the expected DSE at time ``t``.

    Per unique corrupted grid ``u`` and masked cell, ``mass[u, cell]`` is the
    total forward weight and ``hits[u, cell, y]`` the weight whose clean
    token is ``y``.  The expected loss is linear in ``s`` and ``log s``
    given these, which makes repeated evaluation cheap.
    """
    schedule = schedule or NoiseSchedule()
    x0, xt, w = forward_pairs(p0, t, schedule)
    n_real = p0.vocab.n_real
    flat = xt.reshape(len(xt), -1)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    masked = flat == p0.vocab.mask_id
    mass = np.zeros(uniq.shape)
    np.add.at(mass, inv, w[:, None] * masked)
    hits = np.zeros(uniq.shape + (n_real,))
    cells = np.broadcast_to(np.arange(flat.shape[1]), flat.shape)
    rows = np.broadcast_to(inv[:, None], flat.shape)
    np.add.at(hits, (rows[masked], cells[masked], x0.reshape(len(x0), -1)[masked]), np.broadcast_to(w[:, None], flat.shape)[masked])
    return {
        "grids": uniq.reshape((-1,) + p0.grid_shape),
        "mass": mass,
        "hits": hits,
        "sigma": float(schedule.sigma(t)),
        "log_c": float(schedule.log_ratio(t)),
    }


def expected_dse_from_statistics(stats, scores):
    """Expected DSE for a score field ``(U, L, d, n_real)`` over the unique grids of ``stats``."""
    U = len(stats["grids"])
    s = np.asarray(scores, dtype=np.float64).reshape(U, -1, stats["hits"].shape[-1])
    masked = stats["mass"] > 0
    s = np.where(masked[..., None], s, 1.0)
    c, log_c = np.exp(stats["log_c"]), stats["log_c"]
    lin = (stats["mass"] * s.sum(axis=-1)).sum()
    log_term = (stats["hits"] * np.log(s)).sum()
    const = stats["mass"].sum() * (c * log_c - c)
    return stats["sigma"] * (lin - c * log_term + const)


def dse_optimality_probe(p0: ToyDistribution, trials=100, noise=0.3, times=(0.25, 0.5, 0.75), seed=0, schedule=None):
    """Compare expected DSE at the exact score with multiplicatively perturbed scores.

    Returns a report dict with per-trial differences (perturbed - exact) and
    the number of violations (perturbed strictly better by more than 1e-12).
    """
    schedule = schedule or NoiseSchedule()
    rng = np.random.default_rng(seed)
    prepared = []
    for t in times:
        stats = dse_statistics(p0, t, schedule)
        exact = exact_score_field(p0, stats["grids"], t, schedule, floor=SCORE_FLOOR)
        prepared.append((stats, exact, expected_dse_from_statistics(stats, exact)))
    diffs = []
    for _ in range(trials):
        total = 0.0
        for stats, exact, base in prepared:
            pert = exact * np.exp(noise * rng.standard_normal(exact.shape))
            total += expected_dse_from_statistics(stats, pert) - base
        diffs.append(total)
    diffs = np.array(diffs)
    return {
        "trials": trials,
        "noise": noise,
        "times": list(times),
        "min_difference": float(diffs.min()) if trials else 0.0,
        "violations": int(np.sum(diffs < -1e-12)),
        "differences": diffs.tolist(),
    }


class OracleScoreModel:
    """Exact score "model" for enumerable toys.

    ``conditional`` maps a :class:`ConditionSet` to the toy distribution of
    clean grids under that condition; without it every call is unconditional.
    """

    def __init__(self, p0: ToyDistribution, conditional=None, schedule=None):
        self.p0 = p0
        self.vocab = p0.vocab
        self.conditional = conditional
        self.schedule = schedule or NoiseSchedule()

    def _dist(self, cond):
        if cond is None or self.conditional is None or cond.all_null:
            return self.p0
        return self.conditional(cond)

    def log_scores(self, grids, t, conds=None):
        g = check_grid(grids, self.vocab)
        if g.ndim == 2:
            g = g[None]
        if conds is None or isinstance(conds, ConditionSet):
            s = exact_score_field(self._dist(conds), g, t, self.schedule, floor=SCORE_FLOOR)
            return np.log(s)
        out = np.empty(g.shape + (self.vocab.n_real,))
        for cond in set(conds):
            rows = np.array([c == cond for c in conds])
            out[rows] = np.log(exact_score_field(self._dist(cond), g[rows], t, self.schedule, floor=SCORE_FLOOR))
        return out
