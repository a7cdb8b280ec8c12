"""Causal and lookahead masks.

Positions are 0-based throughout. The causal mask comes in an additive
form (``0`` / ``-inf``) for softmax paths and a 0/1 indicator form.
Lookahead masks are boolean only: they feed the sigmoid path, where a
blocked entry is realized by writing 0 rather than exponentiating ``-inf``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskKind:
    """CASTLE (``window=None``) or CASTLE-SWL with a lookahead window."""

    window: int | None = None

    def __post_init__(self) -> None:
        if self.window is not None and self.window < 1:
            raise ValueError(f"sliding window must be >= 1, got {self.window}")

    @classmethod
    def castle(cls) -> "MaskKind":
        return cls(None)

    @classmethod
    def swl(cls, window: int) -> "MaskKind":
        return cls(int(window))

    @property
    def is_swl(self) -> bool:
        return self.window is not None

    @property
    def label(self) -> str:
        return "swl" if self.is_swl else "castle"

    def allows(self, rows, cols) -> np.ndarray:
        """Boolean grid: may lookahead key ``rows[i]`` see token ``cols[j]``?"""
        r = np.asarray(rows)[:, None]
        c = np.asarray(cols)[None, :]
        ok = r < c
        if self.window is not None:
            ok &= c <= r + self.window
        return ok

    def __str__(self) -> str:
        return "castle" if self.window is None else f"swl(W={self.window})"


def build_mc(L: int) -> np.ndarray:
    if L < 1:
        raise ValueError("L must be >= 1")
    out = np.zeros((L, L))
    out[np.triu_indices(L, k=1)] = -np.inf
    return out


def build_mc_tilde(L: int) -> np.ndarray:
    if L < 1:
        raise ValueError("L must be >= 1")
    return np.tril(np.ones((L, L)))


def build_mu(t: int, kind: MaskKind) -> np.ndarray:
    if t < 1:
        raise ValueError("t must be >= 1")
    idx = np.arange(t)
    return kind.allows(idx, idx)


def build_mu_column(t: int, kind: MaskKind) -> np.ndarray:
    """Which of the first ``t - 1`` lookahead keys may see the newest token."""
    if t < 2:
        raise ValueError("t must be >= 2")
    return kind.allows(np.arange(t - 1), [t - 1])[:, 0]


def causal_block(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.asarray(rows)[:, None] >= np.asarray(cols)[None, :]
