"""Block-Hankel algebra and the weighted output operator.

The filtering problem only ever touches the outputs through the linear map

    G(y) = Y_{0,r,N}(y) @ B_map,    B_map = Pi @ Phi.T @ W2,

where ``Pi`` projects onto the nullspace of the input Hankel matrix, ``Phi``
stacks past inputs/outputs as instruments and ``W2`` is the PO-MOESP weight.
All sequences are time-major arrays of shape ``(T, n_channels)``.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import DegenerateProblemError, RecordTooShortError

__all__ = [
    "IoRecord",
    "HankelParams",
    "GOperator",
    "GramSplit",
    "build_block_hankel",
    "nullspace_projector",
    "build_instruments",
    "build_weight_w2",
    "build_g_operator",
    "apply_g",
    "adjoint_g",
    "as_sequence",
]

PINV_RTOL = 1e-10
EIG_FLOOR = 1e-8
NULL_RTOL = 1e-10


def as_sequence(h):
    """Return ``h`` as a float array of shape ``(T, n)``; 1-D input is one channel."""
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    if h.ndim != 2:
        raise ValueError(f"expected a (T, n) sequence, got shape {h.shape}")
    return h


@dataclass
class IoRecord:
    """Multichannel input/output record with an observation mask.

    ``observed`` is a boolean vector over time. When omitted it is inferred
    from the outputs: any row containing NaN is treated as unobserved.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    observed: np.ndarray = None

    def __post_init__(self):
        self.inputs = as_sequence(self.inputs)
        self.outputs = as_sequence(self.outputs)
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError(
                f"inputs and outputs differ in length: "
                f"{self.inputs.shape[0]} != {self.outputs.shape[0]}"
            )
        if self.inputs.shape[1] < 1 or self.outputs.shape[1] < 1:
            raise ValueError("records need at least one input and one output channel")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite; only outputs may be missing")
        T = self.outputs.shape[0]
        finite_rows = np.all(np.isfinite(self.outputs), axis=1)
        if self.observed is None:
            observed = finite_rows
        else:
            observed = np.asarray(self.observed)
            if observed.dtype != bool:
                idx = observed.astype(int).ravel()
                if idx.size and (idx.min() < 0 or idx.max() >= T):
                    raise ValueError("observed indices out of range")
                observed = np.zeros(T, dtype=bool)
                observed[idx] = True
            elif observed.shape != (T,):
                raise ValueError(f"observed mask must have shape ({T},)")
            if np.any(observed & ~finite_rows):
                raise ValueError("observed outputs must be finite")
        self.observed = observed.copy()

    def __len__(self):
        return self.outputs.shape[0]

    @property
    def n_inputs(self):
        return self.inputs.shape[1]

    @property
    def n_outputs(self):
        return self.outputs.shape[1]

    @property
    def observed_indices(self):
        return np.flatnonzero(self.observed)

    def filled_outputs(self):
        """Outputs with unobserved rows set to zero."""
        y = self.outputs.copy()
        y[~self.observed] = 0.0
        return y

    def window(self, start, stop=None):
        stop = len(self) if stop is None else stop
        return IoRecord(
            self.inputs[start:stop],
            self.outputs[start:stop],
            self.observed[start:stop],
        )

    def with_outputs(self, outputs, observed=None):
        return IoRecord(
            self.inputs, outputs, self.observed if observed is None else observed
        )


@dataclass(frozen=True)
class HankelParams:
    """Block rows ``r``, instrument horizon ``s`` and column count ``N``."""

    r: int
    s: int
    N: int

    def __post_init__(self):
        if self.r < 2:
            raise ValueError(f"r must be >= 2, got {self.r}")
        if self.s < 1:
            raise ValueError(f"s must be >= 1, got {self.s}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")

    @classmethod
    def for_length(cls, n_samples, r=5, s=5):
        """Use every sample: ``N = n_samples - s - r + 1``."""
        N = n_samples - s - r + 1
        if N < 1:
            raise RecordTooShortError(
                f"{n_samples} samples cannot hold r={r}, s={s} (need at least {s + r})"
            )
        return cls(r=r, s=s, N=N)

    @property
    def required_length(self):
        return self.s + self.N + self.r - 1

    @property
    def window_length(self):
        """Length of the filtered output sequence, ``N + r - 1``."""
        return self.N + self.r - 1


def build_block_hankel(h, i, j, k):
    """Block Hankel matrix whose block ``(a, b)`` is ``h[i + a + b]``.

    Returns an array of shape ``(j * n, k)`` for an ``(T, n)`` sequence.
    """
    h = as_sequence(h)
    if i < 0 or j < 1 or k < 1:
        raise IndexError(f"invalid Hankel window i={i}, j={j}, k={k}")
    if i + j + k - 1 > h.shape[0]:
        raise IndexError(
            f"sequence of length {h.shape[0]} too short for H_{{{i},{j},{k}}}"
        )
    return np.concatenate([h[i + a : i + a + k].T for a in range(j)], axis=0)


def nullspace_projector(U, rtol=PINV_RTOL):
    """Orthogonal projector onto the nullspace of ``U`` (acts on columns).

    Equivalent to ``I - U.T @ pinv(U @ U.T) @ U`` where eigenvalues of
    ``U @ U.T`` below ``rtol`` times the largest are treated as zero.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n = U.shape[1]
    _, sv, Vt = np.linalg.svd(U, full_matrices=False)
    if sv.size == 0 or sv[0] == 0.0:
        return np.eye(n)
    keep = sv**2 > rtol * sv[0] ** 2
    Vk = Vt[keep]
    Pi = np.eye(n) - Vk.T @ Vk
    return 0.5 * (Pi + Pi.T)


def build_instruments(record, params):
    """Stack past inputs and outputs, ``[U_{-s,s,N}; Y_{-s,s,N}]``.

    Time index 0 of the identification window is raw sample ``s``, so the
    instruments start at raw sample 0. Unobserved outputs enter as zeros.
    """
    if len(record) < params.required_length:
        raise RecordTooShortError(
            f"record has {len(record)} samples, need {params.required_length}"
        )
    U_past = build_block_hankel(record.inputs, 0, params.s, params.N)
    Y_past = build_block_hankel(record.filled_outputs(), 0, params.s, params.N)
    return np.vstack([U_past, Y_past])


def build_weight_w2(Phi, Pi, eig_floor=EIG_FLOOR):
    """Symmetric inverse square root of ``Phi @ Pi @ Phi.T`` with an eigenvalue floor."""
    M = Phi @ Pi @ Phi.T
    M = 0.5 * (M + M.T)
    evals, evecs = np.linalg.eigh(M)
    top = evals[-1] if evals.size else 0.0
    if not top > 0.0:
        raise DegenerateProblemError("instruments annihilated by projection")
    evals = np.maximum(evals, eig_floor * top)
    W2 = (evecs / np.sqrt(evals)) @ evecs.T
    return 0.5 * (W2 + W2.T)


class GramSplit:
    """Range/nullspace eigenbases of a PSD gram matrix with a relative cutoff."""

    def __init__(self, gram, rtol=NULL_RTOL):
        evals, evecs = np.linalg.eigh(gram)
        keep = evals > rtol * max(evals[-1], 0.0)
        self.range_vecs = evecs[:, keep]
        self.null_vecs = evecs[:, ~keep]
        self.inv = 1.0 / evals[keep]

    def pinv(self, x):
        """Apply the pseudoinverse of the gram matrix to ``x`` (columns)."""
        return self.range_vecs @ (self.inv[:, None] * (self.range_vecs.T @ x))

    def drop_null(self, x):
        """Remove the nullspace component of ``x``."""
        if self.null_vecs.shape[1] == 0:
            return x
        return x - self.null_vecs @ (self.null_vecs.T @ x)


@dataclass
class GOperator:
    """Precomputed map ``y -> Hankel(y) @ B_map`` (``W1`` is the identity)."""

    B_map: np.ndarray
    r: int
    N: int
    n_p: int
    Pi: np.ndarray = field(repr=False)
    Phi: np.ndarray = field(repr=False)
    W2: np.ndarray = field(repr=False)

    @property
    def n_c(self):
        return self.B_map.shape[1]

    @property
    def window_length(self):
        return self.N + self.r - 1

    @property
    def output_shape(self):
        return (self.r * self.n_p, self.n_c)

    @cached_property
    def gram(self):
        """Per-channel matrix ``M`` with ``adjoint_g(apply_g(y)) = M @ y``.

        The composition acts identically and independently on every output
        channel: ``M[a:a+N, a:a+N] += B_map @ B_map.T`` for each block row ``a``.
        """
        K = self.B_map @ self.B_map.T
        M = np.zeros((self.window_length, self.window_length))
        for a in range(self.r):
            M[a : a + self.N, a : a + self.N] += K
        return 0.5 * (M + M.T)

    @cached_property
    def gram_split(self):
        """Eigen-split of :attr:`gram` into range and nullspace of ``G``."""
        return GramSplit(self.gram)

    def __call__(self, y):
        return apply_g(self, y)

    def adjoint(self, V):
        return adjoint_g(self, V)


def build_g_operator(record, params, eig_floor=EIG_FLOOR):
    """Assemble ``Pi``, ``Phi``, ``W2`` and ``B_map`` for a record."""
    Phi = build_instruments(record, params)
    U_future = build_block_hankel(record.inputs, params.s, params.r, params.N)
    Pi = nullspace_projector(U_future)
    W2 = build_weight_w2(Phi, Pi, eig_floor)
    B_map = Pi @ Phi.T @ W2
    return GOperator(
        B_map=B_map,
        r=params.r,
        N=params.N,
        n_p=record.n_outputs,
        Pi=Pi,
        Phi=Phi,
        W2=W2,
    )


def _check_sequence(op, y):
    y = as_sequence(y)
    if y.shape != (op.window_length, op.n_p):
        raise ValueError(
            f"output sequence must have shape {(op.window_length, op.n_p)}, got {y.shape}"
        )
    return y


def apply_g(op, y):
    """``Hankel(y) @ B_map``, shape ``(r * n_p, n_c)``."""
    y = _check_sequence(op, y)
    return build_block_hankel(y, 0, op.r, op.N) @ op.B_map


def adjoint_g(op, V):
    """Adjoint of :func:`apply_g` under the trace inner product.

    ``g[t] = sum_a V[block a] @ B_map[t - a]`` over the block rows ``a`` for
    which ``0 <= t - a < N``.
    """
    V = np.asarray(V, dtype=float)
    if V.shape != op.output_shape:
        raise ValueError(f"V must have shape {op.output_shape}, got {V.shape}")
    blocks = V.reshape(op.r, op.n_p, op.n_c)
    g = np.zeros((op.window_length, op.n_p))
    for a in range(op.r):
        g[a : a + op.N] += op.B_map @ blocks[a].T
    return g
