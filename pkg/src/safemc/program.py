"""Solver-agnostic intermediate representation for linear/PSD conic programs.

A program is a set of named matrix variable blocks together with constraints
that are affine in those blocks: elementwise equalities (``expr == 0``),
elementwise inequalities (``expr >= 0``) and positive-semidefiniteness of
symmetric affine expressions, plus a linear objective to minimize.

Affine expressions are closed under every operation offered here, so a
variable-variable product simply cannot be represented: programs are affine
by construction.  Expressions store one dense coefficient tensor per block,
``terms[name][r, s, p, q]``, mapping block entry (p, q) to output entry
(r, s).  Problem sizes in this package are tiny (tens of states), so dense
tensors are simpler and fast enough.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ProgramError(ValueError):
    pass


@dataclass(frozen=True)
class VarBlock:
    name: str
    shape: tuple
    symmetric: bool = False

    def __post_init__(self):
        if len(self.shape) != 2:
            raise ProgramError(f"block {self.name}: shape must be 2-d")
        if self.symmetric and self.shape[0] != self.shape[1]:
            raise ProgramError(f"block {self.name}: symmetric blocks must be square")

    @property
    def scalar_count(self) -> int:
        r, s = self.shape
        return r * (r + 1) // 2 if self.symmetric else r * s


class AffineExpr:
    """Matrix-valued affine expression ``const + sum_b terms[b] . vec(b)``."""

    __slots__ = ("shape", "const", "terms")

    def __init__(self, shape, const=None, terms=None):
        self.shape = tuple(shape)
        self.const = np.zeros(self.shape) if const is None else np.asarray(const, dtype=float)
        if self.const.shape != self.shape:
            raise ProgramError(f"constant shape {self.const.shape} != {self.shape}")
        self.terms = {} if terms is None else dict(terms)

    # -- constructors ------------------------------------------------------

    @staticmethod
    def constant(value) -> "AffineExpr":
        a = np.atleast_2d(np.asarray(value, dtype=float))
        return AffineExpr(a.shape, const=a)

    @staticmethod
    def variable(block: VarBlock) -> "AffineExpr":
        r, s = block.shape
        t = np.zeros((r, s, r, s))
        idx = np.arange(r * s)
        t.reshape(r * s, r * s)[idx, idx] = 1.0
        return AffineExpr((r, s), terms={block.name: t})

    # -- arithmetic --------------------------------------------------------

    def _zip(self, other):
        if not isinstance(other, AffineExpr):
            other = AffineExpr.constant(other)
            if other.shape == (1, 1) and self.shape != (1, 1):
                other = AffineExpr(self.shape, const=np.full(self.shape, other.const[0, 0]))
        if other.shape != self.shape:
            raise ProgramError(f"shape mismatch {self.shape} vs {other.shape}")
        return other

    def __add__(self, other):
        other = self._zip(other)
        terms = dict(self.terms)
        for name, t in other.terms.items():
            terms[name] = terms[name] + t if name in terms else t
        return AffineExpr(self.shape, self.const + other.const, terms)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-self._zip(other))

    def __rsub__(self, other):
        return (-self) + self._zip(other)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, scalar):
        c = float(scalar)
        return AffineExpr(
            self.shape, self.const * c, {k: t * c for k, t in self.terms.items()}
        )

    __rmul__ = __mul__

    # -- structural operations --------------------------------------------

    def hadamard(self, weights) -> "AffineExpr":
        w = np.asarray(weights, dtype=float)
        if w.shape != self.shape:
            raise ProgramError(f"hadamard weights {w.shape} != {self.shape}")
        return AffineExpr(
            self.shape,
            self.const * w,
            {k: t * w[:, :, np.newaxis, np.newaxis] for k, t in self.terms.items()},
        )

    def lmul(self, mat) -> "AffineExpr":
        """Left-multiply by a constant matrix: mat @ expr."""
        a = np.atleast_2d(np.asarray(mat, dtype=float))
        if a.shape[1] != self.shape[0]:
            raise ProgramError(f"cannot left-multiply {a.shape} @ {self.shape}")
        return AffineExpr(
            (a.shape[0], self.shape[1]),
            a @ self.const,
            {k: np.einsum("ar,rspq->aspq", a, t) for k, t in self.terms.items()},
        )

    def rmul(self, mat) -> "AffineExpr":
        """Right-multiply by a constant matrix: expr @ mat."""
        a = np.asarray(mat, dtype=float)
        if a.ndim == 1:
            a = a[:, np.newaxis]
        if a.shape[0] != self.shape[1]:
            raise ProgramError(f"cannot right-multiply {self.shape} @ {a.shape}")
        return AffineExpr(
            (self.shape[0], a.shape[1]),
            self.const @ a,
            {k: np.einsum("rspq,sb->rbpq", t, a) for k, t in self.terms.items()},
        )

    @property
    def T(self) -> "AffineExpr":
        return AffineExpr(
            (self.shape[1], self.shape[0]),
            self.const.T,
            {k: np.transpose(t, (1, 0, 2, 3)) for k, t in self.terms.items()},
        )

    def col_sums(self) -> "AffineExpr":
        return AffineExpr(
            (1, self.shape[1]),
            self.const.sum(axis=0, keepdims=True),
            {k: t.sum(axis=0, keepdims=True) for k, t in self.terms.items()},
        )

    def row(self, i: int) -> "AffineExpr":
        return AffineExpr(
            (1, self.shape[1]),
            self.const[i : i + 1, :],
            {k: t[i : i + 1, :, :, :] for k, t in self.terms.items()},
        )

    def tile_rows(self, nrows: int) -> "AffineExpr":
        if self.shape[0] != 1:
            raise ProgramError("tile_rows needs a single-row expression")
        return AffineExpr(
            (nrows, self.shape[1]),
            np.repeat(self.const, nrows, axis=0),
            {k: np.repeat(t, nrows, axis=0) for k, t in self.terms.items()},
        )

    def tile_cols(self, ncols: int) -> "AffineExpr":
        if self.shape[1] != 1:
            raise ProgramError("tile_cols needs a single-column expression")
        return AffineExpr(
            (self.shape[0], ncols),
            np.repeat(self.const, ncols, axis=1),
            {k: np.repeat(t, ncols, axis=1) for k, t in self.terms.items()},
        )

    def diag_part(self) -> "AffineExpr":
        """Main diagonal as a column expression."""
        r, s = self.shape
        if r != s:
            raise ProgramError("diag_part needs a square expression")
        idx = np.arange(r)
        return AffineExpr(
            (r, 1),
            np.diag(self.const)[:, np.newaxis],
            {k: t[idx, idx, :, :][:, np.newaxis, :, :] for k, t in self.terms.items()},
        )

    def trace(self) -> "AffineExpr":
        return self.diag_part().col_sums()

    def sum_all(self) -> "AffineExpr":
        return self.col_sums().rmul(np.ones((self.shape[1], 1)))

    def times_identity(self, n: int) -> "AffineExpr":
        """Embed a scalar expression as expr * I_n."""
        if self.shape != (1, 1):
            raise ProgramError("times_identity needs a scalar expression")
        eye = np.eye(n)
        return AffineExpr(
            (n, n),
            eye * self.const[0, 0],
            {
                k: eye[:, :, np.newaxis, np.newaxis] * t[0, 0][np.newaxis, np.newaxis, :, :]
                for k, t in self.terms.items()
            },
        )

    # -- evaluation / inspection -------------------------------------------

    def evaluate(self, values: dict) -> np.ndarray:
        out = self.const.copy()
        for name, t in self.terms.items():
            out += np.einsum("rspq,pq->rs", t, np.asarray(values[name], dtype=float))
        return out

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.shape[0] != self.shape[1]:
            return False
        if np.abs(self.const - self.const.T).max() > tol:
            return False
        return all(
            np.abs(t - np.transpose(t, (1, 0, 2, 3))).max() <= tol
            for t in self.terms.values()
        )


def vstack(exprs) -> "AffineExpr":
    exprs = list(exprs)
    ncols = exprs[0].shape[1]
    if any(e.shape[1] != ncols for e in exprs):
        raise ProgramError("vstack needs equal column counts")
    nrows = sum(e.shape[0] for e in exprs)
    const = np.concatenate([e.const for e in exprs], axis=0)
    terms = {}
    offset = 0
    for e in exprs:
        for name, t in e.terms.items():
            if name not in terms:
                p, q = t.shape[2], t.shape[3]
                terms[name] = np.zeros((nrows, ncols, p, q))
            terms[name][offset : offset + e.shape[0]] += t
        offset += e.shape[0]
    return AffineExpr((nrows, ncols), const, terms)


def hstack(exprs) -> "AffineExpr":
    return vstack([e.T for e in exprs]).T


def block2x2(a, b, c, d) -> "AffineExpr":
    return vstack([hstack([a, b]), hstack([c, d])])


@dataclass(frozen=True)
class Constraint:
    name: str
    kind: str  # "eq" (expr == 0), "ineq" (expr >= 0), "psd" (expr >> 0)
    expr: AffineExpr


@dataclass(frozen=True)
class ConicProgram:
    """Immutable conic program. Build one with :class:`ProgramBuilder`."""

    blocks: tuple
    constraints: tuple
    objective: AffineExpr
    objective_sense: str = "min"

    def __post_init__(self):
        names = {b.name for b in self.blocks}
        if len(names) != len(self.blocks):
            raise ProgramError("duplicate block names")
        shapes = {b.name: b.shape for b in self.blocks}
        for c in self.constraints:
            for name, t in c.expr.terms.items():
                if name not in names:
                    raise ProgramError(f"constraint {c.name} uses undeclared block {name}")
                if t.shape[2:] != shapes[name]:
                    raise ProgramError(f"constraint {c.name}: bad coefficient shape for {name}")
            if c.kind == "psd" and not c.expr.is_symmetric():
                raise ProgramError(f"PSD constraint {c.name} is not symmetric")
        if self.objective.shape != (1, 1):
            raise ProgramError("objective must be scalar")

    def block(self, name: str) -> VarBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def block_scalar_counts(self) -> dict:
        return {b.name: b.scalar_count for b in self.blocks}

    def constraint_residuals(self, values: dict) -> dict:
        """Numeric residual of every constraint at the given block values.

        Equalities report ``max |expr|``, inequalities ``max(0, -min expr)``
        and PSD constraints ``max(0, -lambda_min)``.
        """
        out = {}
        for c in self.constraints:
            val = c.expr.evaluate(values)
            if c.kind == "eq":
                out[c.name] = float(np.abs(val).max())
            elif c.kind == "ineq":
                out[c.name] = float(max(0.0, -val.min()))
            else:
                sym = (val + val.T) / 2.0
                out[c.name] = float(max(0.0, -np.linalg.eigvalsh(sym)[0]))
        return out

    def to_json_dict(self) -> dict:
        """Sparse-triplet debug dump.

        Every constraint matrix is flattened row-major: output entry (r, s)
        becomes row ``r * ncols + s`` and block entry (p, q) becomes column
        ``p * q_cols + q``.
        """

        def triplets(a):
            a2 = a.reshape(a.shape[0] * a.shape[1], -1) if a.ndim == 4 else a.reshape(-1, 1)
            rows, cols = np.nonzero(a2)
            return [[int(r), int(c), float(a2[r, c])] for r, c in zip(rows, cols)]

        return {
            "blocks": [
                {"name": b.name, "shape": list(b.shape), "symmetric": b.symmetric}
                for b in self.blocks
            ],
            "constraints": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "shape": list(c.expr.shape),
                    "const": triplets(c.expr.const),
                    "terms": {k: triplets(t) for k, t in c.expr.terms.items()},
                }
                for c in self.constraints
            ],
            "objective": {
                "sense": self.objective_sense,
                "const": float(self.objective.const[0, 0]),
                "terms": {k: triplets(t) for k, t in self.objective.terms.items()},
            },
        }


class ProgramBuilder:
    def __init__(self):
        self._blocks = []
        self._constraints = []
        self._objective: Optional[AffineExpr] = None

    def add_block(self, name: str, shape, symmetric: bool = False) -> AffineExpr:
        block = VarBlock(name, tuple(shape), symmetric)
        if any(b.name == name for b in self._blocks):
            raise ProgramError(f"duplicate block {name}")
        self._blocks.append(block)
        expr = AffineExpr.variable(block)
        if symmetric:
            expr = (expr + expr.T) * 0.5
        return expr

    def add_eq(self, name: str, expr: AffineExpr):
        self._constraints.append(Constraint(name, "eq", expr))

    def add_ineq(self, name: str, expr: AffineExpr):
        self._constraints.append(Constraint(name, "ineq", expr))

    def add_psd(self, name: str, expr: AffineExpr):
        self._constraints.append(Constraint(name, "psd", expr))

    def set_objective(self, expr: AffineExpr):
        self._objective = expr

    def build(self) -> ConicProgram:
        if self._objective is None:
            raise ProgramError("objective not set")
        return ConicProgram(
            tuple(self._blocks), tuple(self._constraints), self._objective
        )
