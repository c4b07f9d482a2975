"""Concrete-score estimators.

``TabularScore`` stores one positive score field per (grid, time bucket) and
is only usable on enumerable state spaces.  ``MMDiT`` is a small multimodal
diffusion transformer built on :mod:`rvqdiff.autodiff`.

Every estimator exposes ``log_scores(grids, t, conds)`` returning an array of
shape ``(B, L, d, n_real)``; the sampler only relies on that method.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .conditions import ConditionSet
from .diffusion import MAX_LEVELS, NoiseSchedule, Vocab, check_grid
from .errors import CapacityError, ConfigError, DomainError, NumericError, ShapeError

ENUMERATION_CAP = 10**6


# ---------------------------------------------------------------------------
# Tabular score
# ---------------------------------------------------------------------------


class TabularScore:
    def __init__(self, vocab: Vocab, levels: int, length: int, n_buckets: int = 100, schedule=None):
        if vocab.n_real ** (levels * length) > ENUMERATION_CAP:
            raise CapacityError(
                f"{vocab.n_real}^{levels * length} states exceed the enumeration cap {ENUMERATION_CAP}"
            )
        self.vocab = vocab
        self.levels = levels
        self.length = length
        self.n_buckets = n_buckets
        self.schedule = schedule or NoiseSchedule()
        self.table: dict = {}

    def bucket(self, t: float) -> int:
        return min(int(float(t) * self.n_buckets), self.n_buckets - 1)

    def bucket_time(self, b: int) -> float:
        return (b + 0.5) / self.n_buckets

    def _key(self, grid, t):
        g = check_grid(grid, self.vocab)
        if g.shape != (self.levels, self.length):
            raise ShapeError(f"grid shape {g.shape} does not match table shape {(self.levels, self.length)}")
        return g.tobytes(), self.bucket(t)

    def score(self, grid, t) -> np.ndarray:
        key = self._key(grid, t)
        hit = self.table.get(key)
        if hit is None:
            return np.ones((self.levels, self.length, self.vocab.n_real))
        return hit.copy()

    def log_scores(self, grids, t, conds=None):
        g = check_grid(grids, self.vocab)
        if g.ndim == 2:
            g = g[None]
        ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (g.shape[0],))
        return np.log(np.stack([self.score(x, tt) for x, tt in zip(g, ts)]))

    def fit(self, pairs):
        """Set each touched entry to its denoising-score-entropy minimizer.

        ``pairs`` yields ``(x0, x_t, t, weight)``.  For a fixed key the
        weighted loss ``sum w sigma (s - c log s)`` is minimized at
        ``s = sum(w sigma c) / sum(w sigma)``, accumulated per entry.
        Entries that only ever see ``c = 0`` would go to zero; they are
        floored at 1e-300 to keep scores positive.
        """
        num, den = {}, {}
        for x0, xt, t, w in pairs:
            key = self._key(xt, t)
            x0 = check_grid(x0, self.vocab, allow_mask=False)
            xt = np.asarray(xt)
            masked = xt == self.vocab.mask_id
            sig = float(self.schedule.sigma(t))
            c = float(np.exp(self.schedule.log_ratio(t)))
            target = np.zeros((self.levels, self.length, self.vocab.n_real))
            li, pi = np.nonzero(masked)
            target[li, pi, x0[li, pi]] = c
            weight = w * sig * masked[:, :, None]
            if key not in num:
                num[key] = np.zeros_like(target)
                den[key] = np.zeros_like(target)
            num[key] += weight * target
            den[key] += weight * np.ones_like(target)
        for key in num:
            d = den[key]
            s = np.where(d > 0, num[key] / np.where(d > 0, d, 1.0), 1.0)
            self.table[key] = np.maximum(s, 1e-300)
        return self

    def fit_expected(self, toy):
        """Fit against the exact forward law of ``toy`` at every bucket midpoint."""
        cells = self.levels * self.length
        patterns = (np.arange(2**cells)[:, None] >> np.arange(cells)[None, :]) & 1

        def pairs():
            for b in range(self.n_buckets):
                t = self.bucket_time(b)
                m = float(self.schedule.mask_prob(t))
                for x0, p in zip(toy.support, toy.probs):
                    flat = x0.reshape(-1)
                    for pat in patterns:
                        k = int(pat.sum())
                        w = p * m**k * (1.0 - m) ** (cells - k)
                        xt = np.where(pat == 1, self.vocab.mask_id, flat).reshape(self.levels, self.length)
                        yield x0, xt, t, w

        return self.fit(pairs())


# ---------------------------------------------------------------------------
# MM-DiT
# ---------------------------------------------------------------------------


@dataclass
class MMDiTConfig:
    n_real: int
    max_levels: int = 2
    n_blocks: int = 2
    hidden: int = 64
    n_heads: int = 4
    id_dim: int = 32
    n_emotions: int = 2
    text_vocab: int = 4
    text_dim: int = 32
    time_freqs: int = 16
    mlp_ratio: int = 4
    score_param: str = "absorbing"
    eps: float = 1e-3
    init_scale: float = 1.0

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ConfigError("hidden must be divisible by n_heads")
        if (self.hidden // self.n_heads) % 2:
            raise ConfigError("head width must be even for rotary embeddings")
        if not 1 <= self.max_levels <= MAX_LEVELS:
            raise ConfigError(f"max_levels must lie in 1..{MAX_LEVELS}")
        if self.score_param not in ("absorbing", "exp"):
            raise ConfigError("score_param must be 'absorbing' or 'exp'")
        if self.n_real < 2:
            raise ConfigError("n_real must be >= 2")

    @classmethod
    def full_scale(cls, n_real=1024, **kw):
        base = dict(max_levels=12, n_blocks=12, hidden=768, n_heads=12, id_dim=256, text_dim=768)
        base.update(kw)
        return cls(n_real=n_real, **base)


@dataclass
class CondBatch:
    id_vec: np.ndarray  # (B, id_dim)
    id_null: np.ndarray  # (B,) bool
    emotion: np.ndarray  # (B,) int, n_emotions = null
    text: np.ndarray  # (B, T) int, text_vocab = null
    text_null: np.ndarray  # (B,) bool


def _rope_tables(positions, width):
    half = width // 2
    inv = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


class MMDiT:
    """Multimodal DiT concrete-score network.

    Levels are embedded separately and averaged into one sequence.  Identity,
    emotion and time are concatenated and regressed into per-block AdaLN
    shift/scale/gate vectors; text enters through rotary cross-attention.
    One AdaLN+linear head per level emits log-scores over real tokens.
    """

    def __init__(self, cfg: MMDiTConfig, params=None, rng=None, identity_anchors=None):
        self.cfg = cfg
        self.vocab = Vocab(cfg.n_real)
        self.schedule = NoiseSchedule(cfg.eps)
        if identity_anchors is None:
            identity_anchors = np.zeros((0, cfg.id_dim))
        self.identity_anchors = np.asarray(identity_anchors, dtype=np.float64)
        if params is None:
            params = self.init_params(rng if rng is not None else np.random.default_rng(0))
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        expected = self.param_shapes()
        for name, shape in expected.items():
            if name not in self.params:
                raise ShapeError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        extra = set(self.params) - set(expected)
        if extra:
            raise ShapeError(f"unexpected parameters {sorted(extra)}")

    # -- parameters ---------------------------------------------------------

    def param_shapes(self):
        c = self.cfg
        H, F = c.hidden, c.time_freqs
        shapes = {}
        for lvl in range(c.max_levels):
            shapes[f"embed.{lvl}"] = (c.n_real + 1, H)
        shapes.update({
            "time.w1": (2 * F, H), "time.b1": (H,),
            "time.w2": (H, H), "time.b2": (H,),
            "cond.id_null": (c.id_dim,),
            "cond.id_w": (c.id_dim, H), "cond.id_b": (H,),
            "cond.emo_table": (c.n_emotions + 1, H),
            "cond.w1": (3 * H, H), "cond.b1": (H,),
            "cond.w2": (H, H), "cond.b2": (H,),
            "text.table": (c.text_vocab + 1, c.text_dim),
            "text.w": (c.text_dim, H), "text.b": (H,),
        })
        for i in range(c.n_blocks):
            p = f"blocks.{i}."
            shapes.update({
                p + "ada.w": (H, 6 * H), p + "ada.b": (6 * H,),
                p + "attn.wq": (H, H), p + "attn.wk": (H, H), p + "attn.wv": (H, H), p + "attn.wo": (H, H),
                p + "xattn.wq": (H, H), p + "xattn.wk": (H, H), p + "xattn.wv": (H, H), p + "xattn.wo": (H, H),
                p + "mlp.w1": (H, c.mlp_ratio * H), p + "mlp.b1": (c.mlp_ratio * H,),
                p + "mlp.w2": (c.mlp_ratio * H, H), p + "mlp.b2": (H,),
            })
        for lvl in range(c.max_levels):
            p = f"heads.{lvl}."
            shapes.update({
                p + "ada.w": (H, 2 * H), p + "ada.b": (2 * H,),
                p + "out.w": (H, c.n_real), p + "out.b": (c.n_real,),
            })
        return shapes

    def init_params(self, rng):
        s = self.cfg.init_scale
        params = {}
        for name, shape in self.param_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("b"):
                params[name] = np.zeros(shape)
            elif "embed" in name or "table" in name or name.endswith("id_null"):
                params[name] = s * 0.5 * rng.standard_normal(shape)
            elif ".ada." in name or name.startswith("heads.") and name.endswith("out.w"):
                params[name] = s * 0.1 * rng.standard_normal(shape) / math.sqrt(shape[0])
            else:
                params[name] = s * rng.standard_normal(shape) / math.sqrt(shape[0])
        return params

    def snapshot(self):
        """Independent copy sharing no arrays with this model."""
        return MMDiT(self.cfg, {k: v.copy() for k, v in self.params.items()}, identity_anchors=self.identity_anchors.copy())

    # -- conditions ---------------------------------------------------------

    def cond_batch(self, conds, batch_size) -> CondBatch:
        c = self.cfg
        if conds is None or isinstance(conds, ConditionSet):
            conds = [conds or ConditionSet()] * batch_size
        if len(conds) != batch_size:
            raise ShapeError(f"{len(conds)} condition sets for a batch of {batch_size}")
        id_vec = np.zeros((batch_size, c.id_dim))
        id_null = np.ones(batch_size, dtype=bool)
        emotion = np.full(batch_size, c.n_emotions, dtype=np.int64)
        lengths = {len(cs.text) for cs in conds if cs.text is not None}
        if len(lengths) > 1:
            raise ShapeError("text conditions in one batch must share a length")
        T = lengths.pop() if lengths else 1
        text = np.full((batch_size, T), c.text_vocab, dtype=np.int64)
        text_null = np.ones(batch_size, dtype=bool)
        for b, cs in enumerate(conds):
            if cs.identity_vec is not None:
                v = np.asarray(cs.identity_vec, dtype=np.float64)
                if v.shape != (c.id_dim,):
                    raise ShapeError(f"identity vector must have shape ({c.id_dim},)")
                id_vec[b], id_null[b] = v, False
            elif cs.identity is not None:
                if not 0 <= cs.identity < len(self.identity_anchors):
                    raise DomainError(f"unknown identity {cs.identity}")
                id_vec[b], id_null[b] = self.identity_anchors[cs.identity], False
            if cs.emotion is not None:
                if not 0 <= cs.emotion < c.n_emotions:
                    raise DomainError(f"unknown emotion {cs.emotion}")
                emotion[b] = cs.emotion
            if cs.text is not None:
                tx = np.asarray(cs.text, dtype=np.int64)
                if tx.size and (tx.min() < 0 or tx.max() >= c.text_vocab):
                    raise DomainError("text symbol outside the text vocabulary")
                text[b], text_null[b] = tx, False
        return CondBatch(id_vec, id_null, emotion, text, text_null)

    # -- forward ------------------------------------------------------------

    def _time_features(self, t):
        F = self.cfg.time_freqs
        sb = self.schedule.sigma_bar(t)
        freqs = np.exp(np.linspace(np.log(0.25), np.log(8.0), F))
        ang = sb[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def _attention(self, xq, xkv, P, prefix, rq, rk):
        B, n, H = xq.shape
        m = xkv.shape[1]
        nh = self.cfg.n_heads
        hd = H // nh

        def heads(x, length):
            return ad.transpose(ad.reshape(x, (B, length, nh, hd)), (0, 2, 1, 3))

        q = ad.rope(heads(ad.matmul(xq, P[prefix + "wq"]), n), *rq)
        k = ad.rope(heads(ad.matmul(xkv, P[prefix + "wk"]), m), *rk)
        v = heads(ad.matmul(xkv, P[prefix + "wv"]), m)
        att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd)), axis=-1)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, n, H))
        return ad.matmul(o, P[prefix + "wo"])

    def forward(self, grids, t, conds=None, params=None):
        """Build the graph; returns ``(log_scores Tensor (B, L, d, n_real), param Tensors)``."""
        c = self.cfg
        g = check_grid(grids, self.vocab, max_levels=c.max_levels)
        if g.ndim == 2:
            g = g[None]
        B, Lu, d = g.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
        cb = conds if isinstance(conds, CondBatch) else self.cond_batch(conds, B)
        values = self.params if params is None else params
        for name, v in values.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite parameter {name}", name=name)
        P = {k: ad.param(v, k) for k, v in values.items()}
        H = c.hidden

        h = ad.take(P["embed.0"], g[:, 0])
        for lvl in range(1, Lu):
            h = ad.add(h, ad.take(P[f"embed.{lvl}"], g[:, lvl]))
        h = ad.mul(h, 1.0 / Lu)

        te = _linear(ad.silu(_linear(self._time_features(t), P["time.w1"], P["time.b1"])), P["time.w2"], P["time.b2"])
        m = cb.id_null[:, None].astype(np.float64)
        idv = ad.add(ad.mul(cb.id_vec, 1.0 - m), ad.mul(P["cond.id_null"], m))
        ide = _linear(idv, P["cond.id_w"], P["cond.id_b"])
        emo = ad.take(P["cond.emo_table"], cb.emotion)
        cvec = _linear(ad.silu(_linear(ad.concat([ide, emo, te], axis=-1), P["cond.w1"], P["cond.b1"])), P["cond.w2"], P["cond.b2"])
        sc = ad.silu(cvec)

        text_idx = np.where(cb.text_null[:, None], c.text_vocab, cb.text)
        T = text_idx.shape[1]
        txt = _linear(ad.take(P["text.table"], text_idx), P["text.w"], P["text.b"])

        hd = H // c.n_heads
        r_self = _rope_tables(np.arange(d), hd)
        # text symbol j is centred on the frames it spans
        r_text = _rope_tables((np.arange(T) + 0.5) * d / T - 0.5, hd)

        for i in range(c.n_blocks):
            p = f"blocks.{i}."
            mod = _linear(sc, P[p + "ada.w"], P[p + "ada.b"])
            shift1, scale1, gate1 = (ad.reshape(mod[:, k * H:(k + 1) * H], (B, 1, H)) for k in range(3))
            shift2, scale2, gate2 = (ad.reshape(mod[:, k * H:(k + 1) * H], (B, 1, H)) for k in range(3, 6))
            x = ad.add(ad.mul(ad.layer_norm(h), ad.add(scale1, 1.0)), shift1)
            h = ad.add(h, ad.mul(gate1, self._attention(x, x, P, p + "attn.", r_self, r_self)))
            x = ad.layer_norm(h)
            h = ad.add(h, self._attention(x, txt, P, p + "xattn.", r_self, r_text))
            x = ad.add(ad.mul(ad.layer_norm(h), ad.add(scale2, 1.0)), shift2)
            ff = _linear(ad.silu(_linear(x, P[p + "mlp.w1"], P[p + "mlp.b1"])), P[p + "mlp.w2"], P[p + "mlp.b2"])
            h = ad.add(h, ad.mul(gate2, ff))

        hn = ad.layer_norm(h)
        offset = self.schedule.log_ratio(t)[:, None, None] if c.score_param == "absorbing" else None
        outs = []
        for lvl in range(Lu):
            p = f"heads.{lvl}."
            mod = _linear(sc, P[p + "ada.w"], P[p + "ada.b"])
            shift = ad.reshape(mod[:, :H], (B, 1, H))
            scale = ad.reshape(mod[:, H:], (B, 1, H))
            raw = _linear(ad.add(ad.mul(hn, ad.add(scale, 1.0)), shift), P[p + "out.w"], P[p + "out.b"])
            if offset is not None:
                raw = ad.add(ad.log_softmax(raw, axis=-1), offset)
            outs.append(ad.reshape(raw, (B, 1, d, c.n_real)))
        return ad.concat(outs, axis=1), P

    def log_scores(self, grids, t, conds=None):
        out, _ = self.forward(grids, t, conds)
        return out.data

    def scores(self, grids, t, conds=None):
        """Positive score field ``(B, L, d, n_real)``."""
        return np.exp(self.log_scores(grids, t, conds))

    def backward(self, grids, t, conds, upstream):
        """Gradients of ``sum(upstream * scores)`` with respect to every parameter."""
        out, P = self.forward(grids, t, conds)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.ndim == 3:
            upstream = upstream[None]
        if upstream.shape != out.shape:
            raise ShapeError(f"upstream gradient shape {upstream.shape} != score shape {out.shape}")
        out.backward(upstream * np.exp(out.data))
        return self._collect(P)

    def _collect(self, P):
        grads = {}
        for name, tensor in P.items():
            gr = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            if not np.all(np.isfinite(gr)):
                raise NumericError(f"non-finite gradient for {name}", name=name)
            grads[name] = gr
        return grads

    def config_dict(self):
        return asdict(self.cfg)
