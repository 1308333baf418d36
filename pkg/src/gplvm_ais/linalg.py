"""Dense float64 linear algebra and the seeded random stream.

Everything here is a pure function of its inputs; RngStream is the one
stateful object and advances an explicit draw counter so sample streams
can be replayed and checkpointed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidCount, NotPositiveDefinite, ShapeMismatch

# Jitter multipliers tried in order, scaled by the mean diagonal of the
# input. Kernel matrices go numerically singular when latent points
# collapse onto each other, so a single fixed jitter is not enough.
DEFAULT_JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T = A + jitter_used * I."""

    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]


def as_matrix(a) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d array, got shape {out.shape}")
    return out


def cholesky(a, jitter_ladder=DEFAULT_JITTER_LADDER) -> CholeskyFactor:
    """Factor a symmetric matrix, walking a jitter ladder until it succeeds.

    jitter_ladder entries are multiples of the mean diagonal; the first
    entry that makes numpy's Cholesky succeed is recorded (as an absolute
    value) in the returned factor.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise ShapeMismatch(f"cholesky needs a square matrix, got {a.shape}")
    scale = float(np.mean(np.diag(a))) if n else 1.0
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    for mult in jitter_ladder:
        jitter = mult * scale
        try:
            lower = np.linalg.cholesky(a + jitter * np.eye(n) if jitter else a)
        except np.linalg.LinAlgError:
            continue
        return CholeskyFactor(lower=lower, jitter_used=jitter)
    raise NotPositiveDefinite(
        f"{n}x{n} matrix not positive definite after jitter ladder "
        f"up to {jitter_ladder[-1]:g} * mean-diag"
    )


def tri_solve(factor: CholeskyFactor, b, side: str = "lower") -> np.ndarray:
    """Solve L x = b (side='lower') or L.T x = b (side='upper')."""
    b = np.asarray(b, dtype=np.float64)
    if side not in ("lower", "upper"):
        raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")
    if b.shape[0] != factor.n:
        raise ShapeMismatch(
            f"factor is {factor.n}x{factor.n} but rhs has leading dim {b.shape[0]}"
        )
    return scipy.linalg.solve_triangular(
        factor.lower, b, lower=True, trans="N" if side == "lower" else "T",
        check_finite=False,
    )


def chol_solve(factor: CholeskyFactor, b) -> np.ndarray:
    """Solve (L L.T) x = b."""
    return tri_solve(factor, tri_solve(factor, b, "lower"), "upper")


def logdet(factor: CholeskyFactor) -> float:
    """log det(L L.T) = 2 * sum(log diag L)."""
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))


def mvn_logpdf(x, mean, cov_factor: CholeskyFactor) -> float:
    """Log density of N(mean, L L.T) at x."""
    x = np.asarray(x, dtype=np.float64).ravel()
    mean = np.asarray(mean, dtype=np.float64).ravel()
    if x.shape != mean.shape or x.shape[0] != cov_factor.n:
        raise ShapeMismatch(
            f"x {x.shape}, mean {mean.shape}, factor {cov_factor.n}x{cov_factor.n}"
        )
    w = tri_solve(cov_factor, x - mean, "lower")
    d = x.shape[0]
    return -0.5 * (d * LOG_2PI + logdet(cov_factor) + float(w @ w))


@dataclass
class RngStream:
    """Counter-based seeded Gaussian stream.

    Built on numpy's Philox generator, so identical (seed, draw order)
    gives an identical sample sequence on every platform at 64-bit
    precision. draw_counter tracks how many scalar draws have happened;
    the full generator state is exposed for checkpointing.

    Draw-order convention used by the training loop, per iteration:
    minibatch J, latent noise, per-step Langevin noise (step 1..K),
    minibatch I, then per-dimension function noise (d = 1..D, each a
    batch-length vector).
    """

    seed: int
    draw_counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def standard_normal(self, n: int) -> np.ndarray:
        if not isinstance(n, (int, np.integer)) or n <= 0:
            raise InvalidCount(f"need a positive draw count, got {n!r}")
        self.draw_counter += int(n)
        return self._gen.standard_normal(int(n))

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.standard_normal(rows * cols).reshape(rows, cols)

    def choice_without_replacement(self, n: int, size: int) -> np.ndarray:
        """size distinct indices from range(n), sorted for reproducible order."""
        if size <= 0 or size > n:
            raise InvalidCount(f"cannot draw {size} of {n} without replacement")
        self.draw_counter += int(size)
        idx = self._gen.choice(n, size=size, replace=False)
        return np.sort(idx)

    def permutation(self, n: int) -> np.ndarray:
        if n <= 0:
            raise InvalidCount(f"need a positive length, got {n!r}")
        self.draw_counter += int(n)
        return self._gen.permutation(n)

    def state(self) -> dict:
        """JSON-serializable generator state for checkpointing."""
        raw = self._gen.bit_generator.state
        return {"seed": int(self.seed), "draw_counter": int(self.draw_counter),
                "bit_generator": {
                    "bit_generator": raw["bit_generator"],
                    "state": {"counter": [int(x) for x in raw["state"]["counter"]],
                              "key": [int(x) for x in raw["state"]["key"]]},
                    "buffer": [int(x) for x in raw["buffer"]],
                    "buffer_pos": int(raw["buffer_pos"]),
                    "has_uint32": int(raw["has_uint32"]),
                    "uinteger": int(raw["uinteger"]),
                }}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(seed=int(state["seed"]))
        rng.draw_counter = int(state["draw_counter"])
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng
