"""Score-entropy training with an RVQ-level curriculum."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import checkpoint
from .conditions import ConditionSet
from .diffusion import NoiseSchedule, Vocab, check_grid, forward_sample
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .models import MMDiT, MMDiTConfig

# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def dse_cell_terms(scores, x0, x_t, t, schedule: NoiseSchedule | None = None):
    """Per-cell denoising score entropy and its gradient w.r.t. ``scores``.

    Shapes: ``scores (..., L, d, n_real)``, ``x0``/``x_t`` ``(..., L, d)``,
    ``t`` scalar or one value per leading batch entry.  Only masked cells
    contribute; for clean token ``y*`` the target ratio is one-hot with
    value ``c = exp(-sb) / (1 - exp(-sb))``.
    """
    schedule = schedule or NoiseSchedule()
    s = np.asarray(scores, dtype=np.float64)
    x0 = np.asarray(x0)
    xt = np.asarray(x_t)
    if x0.shape != xt.shape or s.shape[:-1] != xt.shape:
        raise ShapeError(f"shape mismatch: scores {s.shape}, x0 {x0.shape}, x_t {xt.shape}")
    n_real = s.shape[-1]
    mask_id = n_real
    if np.any(x0 == mask_id) or np.any(x0 < 0) or np.any(x0 > mask_id):
        raise DomainError("x0 must contain real token ids only")
    masked = xt == mask_id
    if np.any(~masked & (xt != x0)):
        raise DomainError("x_t differs from x0 at an unmasked cell")
    # only masked cells are scored; unmasked entries are ignored
    s = np.where(masked[..., None], s, 1.0)
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise DomainError("scores must be positive and finite at masked cells")

    t = np.asarray(t, dtype=np.float64)
    if t.ndim not in (0, xt.ndim - 2) or (t.ndim and t.shape != xt.shape[:t.ndim]):
        raise ShapeError("t must be scalar or match the leading batch shape")
    sig = schedule.sigma(t).reshape(t.shape + (1,) * (xt.ndim - t.ndim))
    log_c = schedule.log_ratio(t).reshape(sig.shape)
    c = np.exp(log_c)

    s_true = np.take_along_axis(s, x0[..., None], axis=-1)[..., 0]
    cell = sig * (s.sum(axis=-1) - c * np.log(s_true) + c * log_c - c)
    cell = np.where(masked, cell, 0.0)
    grad = np.broadcast_to(sig[..., None], s.shape).copy()
    onehot = np.zeros_like(s)
    np.put_along_axis(onehot, x0[..., None], 1.0, axis=-1)
    grad -= sig[..., None] * c[..., None] * onehot / s
    grad *= masked[..., None]
    return cell, grad


def dse_loss(scores, x0, x_t, t, level=None, schedule: NoiseSchedule | None = None):
    """Multi-level DSE summed over levels ``1..level`` and all positions.

    Returns ``(loss, grad)``; ``loss`` is a scalar for a single grid or one
    value per batch entry.
    """
    xt = np.asarray(x_t)
    n_levels = xt.shape[-2]
    level = n_levels if level is None else int(level)
    if not 1 <= level <= n_levels:
        raise DomainError(f"level {level} outside 1..{n_levels}")
    cell, grad = dse_cell_terms(scores, x0, x_t, t, schedule)
    cell = cell[..., :level, :]
    grad[..., level:, :, :] = 0.0
    return cell.sum(axis=(-1, -2)), grad


def dse_per_level(scores, x0, x_t, t, schedule: NoiseSchedule | None = None):
    cell, _ = dse_cell_terms(scores, x0, x_t, t, schedule)
    return cell.sum(axis=-1)


# ---------------------------------------------------------------------------
# Curriculum and condition dropout
# ---------------------------------------------------------------------------


def curriculum_level(epoch: int, max_levels: int = 12, epochs_per_level: int = 3) -> int:
    if epoch < 0:
        raise DomainError("epoch must be >= 0")
    return min(max_levels, 1 + epoch // epochs_per_level)


@dataclass
class CurriculumState:
    epoch: int = 0
    max_levels: int = 12
    epochs_per_level: int = 3

    @property
    def level(self):
        return curriculum_level(self.epoch, self.max_levels, self.epochs_per_level)


def condition_dropout(cond: ConditionSet, rng, p_all: float = 0.1, p_each: float = 0.1) -> ConditionSet:
    """Two-stage null dropout: all slots with ``p_all``, else each slot with ``p_each``.

    Exactly four uniforms are consumed per call.
    """
    u = rng.random(4)
    if u[0] < p_all:
        return cond.null("identity", "emotion", "text")
    drop = [k for k, ui in zip(("identity", "emotion", "text"), u[1:]) if ui < p_each]
    return cond.null(*drop) if drop else cond


# ---------------------------------------------------------------------------
# Identity alignment
# ---------------------------------------------------------------------------


def align_loss(a, b):
    """``1 - cos(a, b) + |a - b|_1 + |a - b|_2`` and its gradient w.r.t. ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity undefined for a zero vector")
    cos = float(a @ b / (na * nb))
    diff = a - b
    nd = np.linalg.norm(diff)
    # 1 - cos as half the squared distance of the unit vectors: exactly 0 for a == b, never negative
    gap = a / na - b / nb
    loss = 0.5 * float(gap @ gap) + np.abs(diff).sum() + nd
    grad = -(b / (na * nb) - cos * a / na**2) + np.sign(diff)
    if nd > 0:
        grad = grad + diff / nd
    return float(loss), grad


def _align_loss_tensor(pred, target):
    """Batched mean align loss on autodiff tensors; ``target`` is a constant array."""
    unit_target = target / np.linalg.norm(target, axis=-1, keepdims=True)
    norm = ad.sqrt(ad.tsum(ad.mul(pred, pred), axis=-1))
    cos = ad.mul(ad.tsum(ad.mul(pred, unit_target), axis=-1), ad.reciprocal(norm))
    diff = ad.add(pred, -target)
    l1 = ad.tsum(ad.absolute(diff), axis=-1)
    # floor keeps the Euclidean term differentiable at diff = 0
    l2 = ad.sqrt(ad.add(ad.tsum(ad.mul(diff, diff), axis=-1), 1e-24))
    return ad.mean(ad.add(ad.add(ad.neg(cos), 1.0), ad.add(l1, l2)))


class IdentityEncoder:
    """Linear map plus a GELU residual branch, face view -> speech-speaker space."""

    def __init__(self, dim, hidden=64, rng=None, params=None):
        self.dim = dim
        self.hidden = hidden
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = {
                "lin.w": np.eye(dim),
                "lin.b": np.zeros(dim),
                "mlp.w1": rng.standard_normal((dim, hidden)) / math.sqrt(dim),
                "mlp.b1": np.zeros(hidden),
                "mlp.w2": np.zeros((hidden, dim)),
                "mlp.b2": np.zeros(dim),
            }
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def _forward(self, x, P):
        lin = ad.add(ad.matmul(x, P["lin.w"]), P["lin.b"])
        res = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, P["mlp.w1"]), P["mlp.b1"])), P["mlp.w2"]), P["mlp.b2"])
        return ad.add(lin, res)

    def __call__(self, x):
        P = {k: ad.Tensor(v) for k, v in self.params.items()}
        return self._forward(np.asarray(x, dtype=np.float64), P).data


@dataclass
class AlignConfig:
    lr: float = 1e-2
    steps: int = 500
    batch_size: int = 32
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-9
    weight_decay: float = 0.0
    hidden: int = 64
    seed: int = 0


def fit_identity_encoder(pairs, config: AlignConfig | None = None):
    """Fit an :class:`IdentityEncoder` minimizing mean ``align_loss`` over ``(face, speech)`` pairs.

    Returns ``(encoder, history)`` where ``history`` holds the mean loss per step.
    """
    config = config or AlignConfig()
    pairs = list(pairs)
    if not pairs:
        raise DomainError("fit_identity_encoder needs at least one pair")
    face = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    speech = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    if face.shape != speech.shape:
        raise ShapeError(f"face views {face.shape} and speech views {speech.shape} differ")
    rng = np.random.default_rng(config.seed)
    enc = IdentityEncoder(face.shape[1], config.hidden, rng=rng)
    opt = AdamW(config.lr, config.betas, config.adam_eps, config.weight_decay)
    history = []
    n = len(face)
    for step in range(config.steps):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        P = {k: ad.param(v, k) for k, v in enc.params.items()}
        loss = _align_loss_tensor(enc._forward(face[idx], P), speech[idx])
        history.append(float(loss.data))
        if loss.data < 1e-12:
            break
        loss.backward()
        opt.step(enc.params, {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()})
    return enc, history


def mean_cosine(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.mean(np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; updates parameter arrays in place."""

    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out["opt.m." + name] = self.m[name]
            out["opt.v." + name] = self.v[name]
        return out

    def load_state(self, arrays, step):
        self.t = int(step)
        self.m = {k[len("opt.m."):]: v.copy() for k, v in arrays.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: v.copy() for k, v in arrays.items() if k.startswith("opt.v.")}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    iterations: int = 20_000
    epochs: int | None = None
    epochs_per_level: int = 3
    curriculum: bool = True
    p_drop_each: float = 0.1
    p_drop_all: float = 0.1
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    t_min: float = 1e-3
    grad_clip: float | None = 1.0
    val_repeats: int = 4
    record_wallclock: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        for name in ("p_drop_each", "p_drop_all"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.t_min < 1.0:
            raise ConfigError("t_min must lie in (0, 1)")
        self.betas = tuple(self.betas)

    def n_epochs(self, n_records):
        if self.epochs is not None:
            return int(self.epochs)
        steps = math.ceil(n_records / self.batch_size)
        return math.ceil(self.iterations / steps)


@dataclass
class TrainResult:
    model: MMDiT
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _record_conditions(records):
    return [ConditionSet(identity=r.identity, emotion=r.emotion, text=tuple(r.text)) for r in records]


def loss_and_grads(model: MMDiT, x0, xt, t, conds, level=None):
    """Batch-mean DSE and parameter gradients for one minibatch."""
    out, P = model.forward(xt, t, conds)
    s = np.exp(out.data)
    per_sample, g = dse_loss(s, x0, xt, t, level, model.schedule)
    B = per_sample.shape[0]
    out.backward(g * s / B)
    return float(per_sample.mean()), model._collect(P)


def validate(model: MMDiT, records, levels, seed, repeats=4, t_min=1e-3):
    """Mean per-level DSE on fixed corruptions of ``records`` using levels ``1..levels`` as input."""
    rng = np.random.default_rng([seed, 7919])
    x0 = np.stack([r.tokens for r in records])[:, :levels]
    conds = _record_conditions(records)
    total = np.zeros(levels)
    count = 0
    for rep in range(repeats):
        n = len(records)
        t = t_min + (1.0 - t_min) * (rng.permutation(n) + rng.random(n)) / n
        xt = forward_sample(x0, t, rng, model.vocab, model.schedule)
        s = model.scores(xt, t, conds)
        total += dse_per_level(s, x0, xt, t, model.schedule).sum(axis=0)
        count += n
    return total / count


def _ckpt_path(out_dir, epoch):
    return Path(out_dir) / f"ckpt_{epoch:04d}.ckpt"


def latest_checkpoint(out_dir):
    found = sorted(Path(out_dir).glob("ckpt_*.ckpt"))
    return found[-1] if found else None


def save_training_checkpoint(path, model, opt, epoch, train_cfg, extra_meta=None):
    arrays = dict(model.params)
    arrays["buffer.identity_anchors"] = model.identity_anchors
    arrays.update(opt.state_arrays())
    meta = {
        "epoch": epoch,
        "opt_step": opt.t,
        "model_config": asdict(model.cfg),
        "train_config": asdict(train_cfg),
        "version": __version__,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    checkpoint.save(path, arrays, meta)


def load_model(path):
    """Load an :class:`MMDiT` (and the raw checkpoint) from a training checkpoint file."""
    arrays, meta = checkpoint.load(path)
    cfg = MMDiTConfig(**meta["model_config"])
    params = {k: v for k, v in arrays.items() if not k.startswith(("opt.", "buffer."))}
    anchors = arrays.get("buffer.identity_anchors")
    return MMDiT(cfg, params, identity_anchors=anchors), arrays, meta


def train(model: MMDiT, dataset, config: TrainConfig, val_records=None, out_dir=None,
          resume=False, stop_after_epoch=None, extra_meta=None, log=None) -> TrainResult:
    """Train ``model`` in place.

    Every epoch appends one JSON line to ``out_dir/metrics.jsonl`` and writes
    ``ckpt_{epoch}.ckpt``.  With ``resume`` the latest checkpoint in
    ``out_dir`` is restored and the metrics log truncated to match, so the
    continuation is bit-identical to an uninterrupted run.
    """
    records = list(dataset)
    if not records:
        raise DomainError("training dataset is empty")
    val_records = list(val_records) if val_records else records[: min(64, len(records))]
    opt = AdamW(config.lr, config.betas, config.adam_eps, config.weight_decay)
    result = TrainResult(model)
    start_epoch = 0
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        if resume and (ck := latest_checkpoint(out_dir)) is not None:
            arrays, meta = checkpoint.load(ck)
            for name in model.params:
                model.params[name] = arrays[name].copy()
            opt.load_state(arrays, meta["opt_step"])
            start_epoch = meta["epoch"] + 1
            kept = []
            if metrics_path.exists():
                for line in metrics_path.read_text().splitlines():
                    rec = json.loads(line)
                    if rec["epoch"] <= meta["epoch"]:
                        kept.append(line)
                        result.metrics.append(rec)
            metrics_path.write_text("".join(l + "\n" for l in kept))
            result.checkpoints.append(ck)
        elif metrics_path.exists():
            metrics_path.unlink()

    tokens = np.stack([r.tokens for r in records])
    conds_all = _record_conditions(records)
    max_levels = min(model.cfg.max_levels, tokens.shape[1])
    n = len(records)
    steps_per_epoch = math.ceil(n / config.batch_size)
    n_epochs = config.n_epochs(n)
    last_good = result.checkpoints[-1] if result.checkpoints else None

    for epoch in range(start_epoch, n_epochs):
        if stop_after_epoch is not None and epoch > stop_after_epoch:
            break
        t0 = time.perf_counter()
        level = curriculum_level(epoch, max_levels, config.epochs_per_level) if config.curriculum else max_levels
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses, norms = [], []
        for step in range(steps_per_epoch):
            rng = np.random.default_rng([config.seed, epoch, step])
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            x0 = tokens[idx, :level]
            t = rng.uniform(config.t_min, 1.0, len(idx))
            xt = forward_sample(x0, t, rng, model.vocab, model.schedule)
            conds = [condition_dropout(conds_all[i], rng, config.p_drop_all, config.p_drop_each) for i in idx]
            loss, grads = loss_and_grads(model, x0, xt, t, conds, level)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch} step {step}", last_checkpoint=last_good)
            gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if config.grad_clip is not None and gnorm > config.grad_clip:
                scale = config.grad_clip / gnorm
                grads = {k: g * scale for k, g in grads.items()}
            opt.step(model.params, grads)
            losses.append(loss)
            norms.append(gnorm)
        val = validate(model, val_records, level, config.seed, config.val_repeats, config.t_min)
        rec = {
            "epoch": epoch,
            "level": level,
            "train_dse": float(np.mean(losses)),
            "val_dse_per_level": [float(v) for v in val] + [None] * (max_levels - level),
            "grad_norm": float(np.mean(norms)),
            "wallclock_s": round(time.perf_counter() - t0, 3) if config.record_wallclock else None,
        }
        result.metrics.append(rec)
        if log is not None:
            log(rec)
        if out_dir is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            ck = _ckpt_path(out_dir, epoch)
            save_training_checkpoint(ck, model, opt, epoch, config, extra_meta)
            result.checkpoints.append(ck)
            last_good = ck
    return result
