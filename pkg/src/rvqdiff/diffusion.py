"""Absorbing-state forward process on multi-level token grids.

Token ids ``0 .. n_real-1`` are real codebook entries and ``n_real`` is the
absorbing MASK symbol.  A grid is an integer array of shape ``(L, d)`` (one
row per RVQ level) or ``(B, L, d)`` for a batch of grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

MAX_LEVELS = 12


@dataclass(frozen=True)
class Vocab:
    n_real: int

    def __post_init__(self):
        if self.n_real < 2:
            raise DomainError(f"n_real must be >= 2, got {self.n_real}")

    @property
    def mask_id(self) -> int:
        return self.n_real

    @property
    def n(self) -> int:
        return self.n_real + 1


def check_grid(grid, vocab: Vocab, max_levels: int = MAX_LEVELS, allow_mask: bool = True) -> np.ndarray:
    """Validate a ``(L, d)`` or ``(B, L, d)`` token grid and return it as int64."""
    g = np.asarray(grid)
    if g.ndim not in (2, 3):
        raise ShapeError(f"grid must have shape (L, d) or (B, L, d), got {g.shape}")
    if not np.issubdtype(g.dtype, np.integer):
        raise ShapeError(f"grid must hold integer token ids, got dtype {g.dtype}")
    levels = g.shape[-2]
    if not 1 <= levels <= max_levels:
        raise ShapeError(f"grid has {levels} levels, expected 1..{max_levels}")
    if g.shape[-1] < 1:
        raise ShapeError("grid length must be >= 1")
    top = vocab.mask_id if allow_mask else vocab.n_real - 1
    if g.size and (g.min() < 0 or g.max() > top):
        raise DomainError(f"grid contains ids outside 0..{top}")
    return g.astype(np.int64, copy=False)


@dataclass(frozen=True)
class NoiseSchedule:
    """Log-linear schedule: mask probability ``1 - exp(-sigma_bar(t)) = (1 - eps) t``."""

    eps: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise DomainError(f"eps must lie in (0, 1), got {self.eps}")

    @staticmethod
    def _check_t(t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
            raise DomainError("t must lie in [0, 1]")
        return t

    def sigma_bar(self, t):
        t = self._check_t(t)
        return -np.log1p(-(1.0 - self.eps) * t)

    def sigma(self, t):
        t = self._check_t(t)
        return (1.0 - self.eps) / (1.0 - (1.0 - self.eps) * t)

    def mask_prob(self, t):
        t = self._check_t(t)
        return (1.0 - self.eps) * t

    def keep_prob(self, t):
        return 1.0 - self.mask_prob(t)

    def log_ratio(self, t):
        """log(e^{-sigma_bar} / (1 - e^{-sigma_bar})), the one-hot concrete score scale."""
        m = self.mask_prob(t)
        with np.errstate(divide="ignore"):
            return np.log1p(-m) - np.log(m)


def sigma_bar(t, eps: float = 1e-3):
    return NoiseSchedule(eps).sigma_bar(t)


def transition_rate_matrix(vocab: Vocab) -> np.ndarray:
    """Token-level generator with rows as source states.

    Every real token leaks to MASK at unit rate; the MASK row is zero.
    """
    q = np.zeros((vocab.n, vocab.n))
    idx = np.arange(vocab.n_real)
    q[idx, idx] = -1.0
    q[idx, vocab.mask_id] = 1.0
    return q


def forward_marginal(x0_token: int, sigma_bar_value: float, vocab: Vocab) -> dict:
    """Two-point law of a clean token after cumulative noise ``sigma_bar_value``."""
    if not 0 <= x0_token < vocab.n_real:
        raise DomainError(f"x0_token must be a real token id, got {x0_token}")
    if sigma_bar_value < 0 or np.isnan(sigma_bar_value):
        raise DomainError("sigma_bar must be nonnegative")
    keep = float(np.exp(-sigma_bar_value))
    return {int(x0_token): keep, vocab.mask_id: 1.0 - keep}


def forward_sample(grid, t, rng: np.random.Generator, vocab: Vocab, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Mask each cell independently with probability ``1 - exp(-sigma_bar(t))``.

    ``t`` may be a scalar or, for a batch ``(B, L, d)``, an array of shape ``(B,)``.
    """
    schedule = schedule or NoiseSchedule()
    g = check_grid(grid, vocab)
    if np.any(g == vocab.mask_id):
        raise DomainError("forward_sample expects a mask-free grid")
    p = schedule.mask_prob(t)
    if p.ndim == 1:
        if g.ndim != 3 or p.shape[0] != g.shape[0]:
            raise ShapeError("per-sample t needs a (B, L, d) grid with matching B")
        p = p[:, None, None]
    u = rng.random(g.shape)
    return np.where(u < p, vocab.mask_id, g)
