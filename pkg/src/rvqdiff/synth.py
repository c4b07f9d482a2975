"""Synthetic hierarchical token data with identity, emotion and text labels.

Level 1 is a run process: the base symbol distribution depends on the
identity, the switching probability on the emotion.  Each higher level is a
faster run process whose draws depend on the token below and on the text
symbol aligned to the position.  Everything is a pure function of
``(config, seed, record index)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .conditions import ConditionSet
from .diffusion import MAX_LEVELS, Vocab
from .errors import CapacityError, ConfigError, DomainError
from .kernels import runs
from .oracle import ENUMERATION_CAP, ToyDistribution

DEFAULT_LEVEL_RUN_MEANS = tuple(round(1.6 - 0.05 * k, 2) for k in range(MAX_LEVELS - 1))


@dataclass(frozen=True)
class SynthConfig:
    n_real: int = 8
    levels: int = 2
    length: int = 16
    n_identities: int = 2
    n_emotions: int = 2
    text_alphabet: int = 4
    frames_per_symbol: int = 4
    emotion_run_means: tuple = (8.0, 2.0)
    level_run_means: tuple = DEFAULT_LEVEL_RUN_MEANS
    identity_purity: float = 0.8
    emission_purity: float = 0.7
    embed_dim: int = 32
    face_noise: float = 0.0
    distortion: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "emotion_run_means", tuple(float(v) for v in self.emotion_run_means))
        object.__setattr__(self, "level_run_means", tuple(float(v) for v in self.level_run_means))
        if self.n_real < 2:
            raise ConfigError("n_real must be at least 2")
        if not 1 <= self.levels <= MAX_LEVELS:
            raise ConfigError(f"levels must lie in [1, {MAX_LEVELS}]")
        if self.length < 1 or self.frames_per_symbol < 1:
            raise ConfigError("length and frames_per_symbol must be positive")
        if not 1 <= self.n_identities <= self.n_real:
            raise ConfigError("need 1 <= n_identities <= n_real")
        if self.n_emotions < 1 or self.text_alphabet < 1:
            raise ConfigError("n_emotions and text_alphabet must be positive")
        if len(self.emotion_run_means) != self.n_emotions:
            raise ConfigError("emotion_run_means needs one entry per emotion")
        if min(self.emotion_run_means) <= 1.0:
            raise ConfigError("run-length means must exceed 1")
        upper = self.level_run_means[: self.levels - 1]
        if len(upper) < self.levels - 1:
            raise ConfigError("level_run_means needs an entry for every level above the first")
        if upper:
            if min(upper) <= 1.0:
                raise ConfigError("run-length means must exceed 1")
            if any(b >= a for a, b in zip(upper, upper[1:])) or upper[0] >= min(self.emotion_run_means):
                raise ConfigError("run-length means must strictly decrease with level")
        for name in ("identity_purity", "emission_purity"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.face_noise < 0:
            raise ConfigError("face_noise must be nonnegative")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_real)

    @property
    def n_symbols(self) -> int:
        return -(-self.length // self.frames_per_symbol)

    @property
    def text_at(self):
        return np.arange(self.length) // self.frames_per_symbol

    @cached_property
    def base_dists(self):
        """``(n_identities, n_real)`` level-1 symbol distribution per identity."""
        blocks = np.array_split(np.arange(self.n_real), self.n_identities)
        out = np.full((self.n_identities, self.n_real), (1.0 - self.identity_purity) / self.n_real)
        for i, block in enumerate(blocks):
            out[i, block] += self.identity_purity / len(block)
        return out

    @cached_property
    def emission_tables(self):
        """``(levels-1, n_real, text_alphabet, n_real)`` draw tables for the upper levels."""
        n, A = self.n_real, self.text_alphabet
        out = np.full((max(self.levels - 1, 0), n, A, n), (1.0 - self.emission_purity) / n)
        for k in range(self.levels - 1):
            for b in range(n):
                for s in range(A):
                    out[k, b, s, (b + (k + 1) * (s + 1)) % n] += self.emission_purity
        return out

    @property
    def switch_probs(self):
        return 1.0 / np.array(self.emotion_run_means), 1.0 / np.array(self.level_run_means[: self.levels - 1])

    def to_dict(self):
        d = asdict(self)
        d["emotion_run_means"] = list(self.emotion_run_means)
        d["level_run_means"] = list(self.level_run_means)
        return d


@dataclass
class DatasetRecord:
    id: int
    tokens: np.ndarray
    identity: int
    emotion: int
    text: tuple
    duration: int

    @property
    def condition(self) -> ConditionSet:
        return ConditionSet(identity=self.identity, emotion=self.emotion, text=self.text)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "tokens": np.asarray(self.tokens).tolist(),
            "identity": self.identity,
            "emotion": self.emotion,
            "text": None if self.text is None else list(self.text),
            "duration": self.duration,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            id=obj["id"],
            tokens=np.asarray(obj["tokens"], dtype=np.int64),
            identity=obj["identity"],
            emotion=obj["emotion"],
            text=None if obj["text"] is None else tuple(obj["text"]),
            duration=obj["duration"],
        )


@dataclass
class EmbeddingPair:
    face_view: np.ndarray
    speech_view: np.ndarray
    identity: int = field(default=-1)


def _generate(cfg: SynthConfig, identity, emotion, text, u_switch, u_draw):
    """Token grids ``(N, L, d)`` from labels and pre-drawn uniforms ``(N, L, d)``."""
    N, L, d = len(identity), cfg.levels, cfg.length
    q1, q_up = cfg.switch_probs
    tokens = np.empty((N, L, d), dtype=np.int64)
    dist = np.broadcast_to(cfg.base_dists[identity][:, None, :], (N, d, cfg.n_real))
    tokens[:, 0] = runs(dist, q1[emotion], u_switch[:, 0], u_draw[:, 0])
    text_pos = text[:, cfg.text_at]
    for k in range(L - 1):
        dist = cfg.emission_tables[k][tokens[:, k], text_pos]
        tokens[:, k + 1] = runs(dist, np.full(N, q_up[k]), u_switch[:, k + 1], u_draw[:, k + 1])
    return tokens


def _record_draws(cfg: SynthConfig, index):
    rng = np.random.default_rng([cfg.seed, index])
    identity = int(rng.integers(cfg.n_identities))
    emotion = int(rng.integers(cfg.n_emotions))
    text = rng.integers(cfg.text_alphabet, size=cfg.n_symbols)
    u = rng.random((2, cfg.levels, cfg.length))
    return identity, emotion, text, u


def gen_dataset(cfg: SynthConfig, n_records: int, start: int = 0):
    if n_records < 0:
        raise DomainError("n_records must be nonnegative")
    if n_records == 0:
        return []
    draws = [_record_draws(cfg, i) for i in range(start, start + n_records)]
    identity = np.array([x[0] for x in draws])
    emotion = np.array([x[1] for x in draws])
    text = np.stack([x[2] for x in draws])
    u = np.stack([x[3] for x in draws])
    tokens = _generate(cfg, identity, emotion, text, u[:, 0], u[:, 1])
    return [
        DatasetRecord(start + i, tokens[i], int(identity[i]), int(emotion[i]), tuple(int(s) for s in text[i]), cfg.length)
        for i in range(n_records)
    ]


def identity_anchors(cfg: SynthConfig):
    """Orthonormal unit anchors, one row per identity (pairwise cosine 0)."""
    if cfg.n_identities > cfg.embed_dim:
        raise ConfigError("embed_dim must be at least n_identities")
    rng = np.random.default_rng([cfg.seed, 0xA2C])
    q, _ = np.linalg.qr(rng.standard_normal((cfg.embed_dim, cfg.n_identities)))
    return q.T.copy()


def distortion_matrix(cfg: SynthConfig):
    rng = np.random.default_rng([cfg.seed, 0xD15])
    return np.eye(cfg.embed_dim) + cfg.distortion * rng.standard_normal((cfg.embed_dim, cfg.embed_dim)) / np.sqrt(cfg.embed_dim)


def gen_embedding_pairs(cfg: SynthConfig, n_pairs: int, start: int = 0):
    anchors = identity_anchors(cfg)
    M = distortion_matrix(cfg)
    out = []
    for i in range(start, start + n_pairs):
        rng = np.random.default_rng([cfg.seed, 0xE4B, i])
        ident = int(rng.integers(cfg.n_identities))
        speech = anchors[ident]
        noise = rng.standard_normal(cfg.embed_dim) / np.sqrt(cfg.embed_dim)
        out.append(EmbeddingPair(M @ speech + cfg.face_noise * noise, speech.copy(), ident))
    return out


# ---------------------------------------------------------------------------
# exact likelihoods
# ---------------------------------------------------------------------------


def _runs_logpdf(x, dist, q):
    """Log-probability of runs ``x`` ``(N, d)`` under per-position ``dist`` ``(N, d, n)``."""
    N, d = x.shape
    rows = np.arange(N)[:, None]
    pos = np.arange(d)[None, :]
    px = dist[rows, pos, x]
    lp = np.log(px[:, 0])
    if d > 1:
        prev_p = dist[rows, pos[:, 1:], x[:, :-1]]
        same = x[:, 1:] == x[:, :-1]
        q = np.asarray(q, dtype=np.float64).reshape(-1, 1)
        switch = np.log(q) + np.log(px[:, 1:]) - np.log1p(-prev_p)
        lp = lp + np.where(same, np.log1p(-q), switch).sum(axis=1)
    return lp


def level1_loglik(cfg: SynthConfig, level1, identity, emotion):
    level1 = np.asarray(level1, dtype=np.int64)
    N = len(level1)
    q1, _ = cfg.switch_probs
    identity = np.broadcast_to(identity, (N,))
    emotion = np.broadcast_to(emotion, (N,))
    dist = np.broadcast_to(cfg.base_dists[identity][:, None, :], (N, cfg.length, cfg.n_real))
    return _runs_logpdf(level1, dist, q1[emotion])


def upper_loglik(cfg: SynthConfig, tokens, text):
    tokens = np.asarray(tokens, dtype=np.int64)
    return _upper_position_terms(cfg, tokens, np.asarray(text, dtype=np.int64)).sum(axis=1)


def log_likelihood(cfg: SynthConfig, tokens, identity, emotion, text):
    """``log p(tokens | identity, emotion, text)`` for a batch ``(N, L, d)``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    return level1_loglik(cfg, tokens[:, 0], identity, emotion) + upper_loglik(cfg, tokens, text)


def classify(cfg: SynthConfig, tokens):
    """Maximum-likelihood labels of generated grids.

    Identity and emotion only touch level 1, so each is decided by the
    level-1 likelihood marginalized over the other label.  Text symbols
    decouple per position and are decided one by one from the upper levels.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    N = len(tokens)
    ll = np.stack(
        [np.stack([level1_loglik(cfg, tokens[:, 0], i, e) for e in range(cfg.n_emotions)], axis=1) for i in range(cfg.n_identities)],
        axis=1,
    )  # (N, I, E)
    ident = np.logaddexp.reduce(ll, axis=2).argmax(axis=1)
    emo = np.logaddexp.reduce(ll, axis=1).argmax(axis=1)
    text = np.zeros((N, cfg.n_symbols), dtype=np.int64)
    if cfg.levels > 1:
        scores = np.zeros((N, cfg.n_symbols, cfg.text_alphabet))
        for s in range(cfg.text_alphabet):
            for sym in range(cfg.n_symbols):
                probe = np.zeros(cfg.n_symbols, dtype=np.int64)
                probe[sym] = s
                # only the positions aligned with this symbol depend on it
                scores[:, sym, s] = _upper_position_terms(cfg, tokens, probe)[:, cfg.text_at == sym].sum(axis=1)
        text = scores.argmax(axis=2)
    return {"identity": ident, "emotion": emo, "text": text}


def _upper_position_terms(cfg, tokens, text):
    N, d = len(tokens), cfg.length
    _, q_up = cfg.switch_probs
    text_pos = np.broadcast_to(text, (N, cfg.n_symbols))[:, cfg.text_at]
    rows = np.arange(N)[:, None]
    pos = np.arange(d)[None, :]
    out = np.zeros((N, d))
    for k in range(cfg.levels - 1):
        dist = cfg.emission_tables[k][tokens[:, k], text_pos]
        x = tokens[:, k + 1]
        px = dist[rows, pos, x]
        term = np.log(px)
        if d > 1:
            prev_p = dist[rows, pos[:, 1:], x[:, :-1]]
            same = x[:, 1:] == x[:, :-1]
            term[:, 1:] = np.where(same, np.log1p(-q_up[k]), np.log(q_up[k]) + term[:, 1:] - np.log1p(-prev_p))
        out += term
    return out


def label_accuracy(cfg: SynthConfig, tokens, identity=None, emotion=None, text=None):
    pred = classify(cfg, tokens)
    out = {}
    if identity is not None:
        out["identity"] = float(np.mean(pred["identity"] == np.asarray(identity)))
    if emotion is not None:
        out["emotion"] = float(np.mean(pred["emotion"] == np.asarray(emotion)))
    if text is not None and cfg.levels > 1:
        out["text"] = float(np.mean(pred["text"] == np.asarray(text)))
    return out


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------


class ToyFamily:
    """Exact distribution of a small generator config, overall and per condition."""

    def __init__(self, cfg: SynthConfig, states, joint_logp):
        self.cfg = cfg
        self.states = states  # (S, L, d)
        self.joint_logp = joint_logp  # (I, E, T, S): log p(x | id, emo, text)
        self.texts = list(itertools.product(range(cfg.text_alphabet), repeat=cfg.n_symbols))
        self._cache = {}

    def _weights(self, cond: ConditionSet | None):
        cfg = self.cfg
        I, E, T = cfg.n_identities, cfg.n_emotions, len(self.texts)
        sel_i = range(I) if cond is None or cond.identity is None else [cond.identity]
        sel_e = range(E) if cond is None or cond.emotion is None else [cond.emotion]
        if cond is None or cond.text is None:
            sel_t = range(T)
        else:
            key = tuple(cond.text)
            if key not in self.texts:
                raise DomainError(f"unknown text condition {key!r}")
            sel_t = [self.texts.index(key)]
        for v, n in ((sel_i, I), (sel_e, E)):
            if any(not 0 <= x < n for x in v):
                raise DomainError("condition value out of range")
        lp = self.joint_logp[np.ix_(list(sel_i), list(sel_e), list(sel_t))]
        p = np.exp(lp).reshape(-1, lp.shape[-1]).mean(axis=0)
        return p

    def conditional(self, cond: ConditionSet | None = None) -> ToyDistribution:
        key = None if cond is None else (cond.identity, cond.emotion, cond.text)
        if key not in self._cache:
            p = self._weights(cond)
            keep = p > 0
            self._cache[key] = ToyDistribution(self.states[keep], p[keep] / p[keep].sum(), self.cfg.vocab)
        return self._cache[key]

    @property
    def unconditional(self) -> ToyDistribution:
        return self.conditional(None)

    def family(self, kind):
        """``ConditionalFamily`` over one condition slot."""
        from .oracle import ConditionalFamily

        if kind == "identity":
            values = range(self.cfg.n_identities)
            conds = {v: ConditionSet(identity=v) for v in values}
        elif kind == "emotion":
            values = range(self.cfg.n_emotions)
            conds = {v: ConditionSet(emotion=v) for v in values}
        elif kind == "text":
            conds = {t: ConditionSet(text=t) for t in self.texts}
        else:
            raise DomainError(f"unknown condition kind {kind!r}")
        prior = 1.0 / len(conds)
        return ConditionalFamily({v: self.conditional(c) for v, c in conds.items()}, {v: prior for v in conds})


def enumerate_toy_distribution(cfg: SynthConfig) -> ToyFamily:
    cells = cfg.levels * cfg.length
    n_states = cfg.n_real**cells
    n_text = cfg.text_alphabet**cfg.n_symbols
    if n_states > ENUMERATION_CAP:
        raise CapacityError(f"{n_states} states exceed the enumeration cap of {ENUMERATION_CAP}")
    if n_states * n_text * cfg.n_identities * cfg.n_emotions > 50 * ENUMERATION_CAP:
        raise CapacityError("too many (state, condition) combinations to enumerate")
    digits = (np.arange(n_states)[:, None] // cfg.n_real ** np.arange(cells)[::-1][None, :]) % cfg.n_real
    states = digits.reshape(n_states, cfg.levels, cfg.length).astype(np.int64)
    texts = np.array(list(itertools.product(range(cfg.text_alphabet), repeat=cfg.n_symbols)), dtype=np.int64)
    l1 = np.stack(
        [np.stack([level1_loglik(cfg, states[:, 0], i, e) for e in range(cfg.n_emotions)]) for i in range(cfg.n_identities)]
    )  # (I, E, S)
    up = np.stack([upper_loglik(cfg, states, t) for t in texts])  # (T, S)
    joint = l1[:, :, None, :] + up[None, None, :, :]
    return ToyFamily(cfg, states, joint)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_records(path, records, header: dict | None = None):
    path = Path(path)
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines.extend(json.dumps(r.to_json(), sort_keys=True) for r in records)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    tmp.replace(path)


def read_records(path):
    """Read a record file; returns ``(records, header_or_None)``."""
    records, header = [], None
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DomainError(f"{path}:{n}: not a JSON record ({exc})") from exc
            if "header" in obj and len(obj) == 1:
                header = obj["header"]
                continue
            try:
                records.append(DatasetRecord.from_json(obj))
            except KeyError as exc:
                raise DomainError(f"{path}:{n}: missing key {exc}") from exc
    return records, header
