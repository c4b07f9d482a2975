"""Condition sets for identity / emotion / text, with ``None`` as the null condition."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

CONDITION_KINDS = ("identity", "emotion", "text")


@dataclass(frozen=True)
class ConditionSet:
    """One conditioning triplet.  ``None`` in a slot means the null condition.

    ``identity_vec`` optionally overrides the identity embedding (e.g. the
    output of the face-side identity encoder); otherwise the integer
    ``identity`` is looked up in the model's anchor table.
    """

    identity: int | None = None
    emotion: int | None = None
    text: tuple | None = None
    identity_vec: np.ndarray | None = None

    def __post_init__(self):
        if self.text is not None:
            object.__setattr__(self, "text", tuple(int(s) for s in self.text))

    def __eq__(self, other):
        if not isinstance(other, ConditionSet):
            return NotImplemented
        same_vec = (self.identity_vec is None and other.identity_vec is None) or (
            self.identity_vec is not None
            and other.identity_vec is not None
            and np.array_equal(self.identity_vec, other.identity_vec)
        )
        return (self.identity, self.emotion, self.text) == (other.identity, other.emotion, other.text) and same_vec

    def __hash__(self):
        return hash((self.identity, self.emotion, self.text))

    def has_identity(self):
        return self.identity is not None or self.identity_vec is not None

    def is_null(self, kind):
        if kind == "identity":
            return not self.has_identity()
        return getattr(self, kind) is None

    @property
    def all_null(self):
        return all(self.is_null(k) for k in CONDITION_KINDS)

    def null(self, *kinds):
        """Copy with the named slots set to the null condition."""
        updates = {}
        for kind in kinds:
            if kind not in CONDITION_KINDS:
                raise KeyError(kind)
            updates[kind] = None
            if kind == "identity":
                updates["identity_vec"] = None
        return replace(self, **updates)

    def only(self, kind):
        """Copy keeping just one condition."""
        return self.null(*[k for k in CONDITION_KINDS if k != kind])


NULL = ConditionSet()
