"""Multivariate real polynomials used for every density-dependent rate."""

from __future__ import annotations

from collections import defaultdict
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np


class PolynomialError(ValueError):
    pass


@lru_cache(maxsize=None)
def _symbols(q: int):
    import sympy

    return tuple(sympy.Symbol(f"h{k + 1}") for k in range(q))


def _parse_sympy(text: str, q: int):
    import sympy
    from sympy.parsing.sympy_parser import (
        convert_xor,
        parse_expr,
        rationalize,
        standard_transformations,
    )

    syms = _symbols(q)
    local = {s.name: s for s in syms}
    if q == 1:
        local["h"] = syms[0]
    try:
        expr = parse_expr(
            text,
            local_dict=local,
            global_dict={"Integer": sympy.Integer, "Rational": sympy.Rational, "Float": sympy.Float,
                         "Symbol": sympy.Symbol},
            transformations=standard_transformations + (convert_xor, rationalize),
        )
    except Exception as exc:  # sympy raises a zoo of exception types
        raise PolynomialError(f"cannot parse polynomial {text!r}: {exc}") from None
    stray = expr.free_symbols - set(syms)
    if stray:
        names = ", ".join(sorted(str(s) for s in stray))
        raise PolynomialError(f"unknown variable(s) {names} in {text!r}; use h1..h{q}")
    try:
        return sympy.Poly(expr, *syms)
    except sympy.PolynomialError:
        raise PolynomialError(f"{text!r} is not a polynomial in h") from None


class Polynomial:
    """Polynomial in ``q`` variables, kept as a sparse map exponent tuple -> coefficient."""

    __slots__ = ("q", "terms", "_exps", "_coefs")

    def __init__(self, terms: Mapping[tuple[int, ...], float], q: int):
        self.q = int(q)
        clean = {}
        for exp, c in terms.items():
            exp = tuple(int(e) for e in exp)
            if len(exp) != self.q or min(exp, default=0) < 0:
                raise PolynomialError(f"bad exponent {exp} for q={self.q}")
            c = float(c)
            if c != 0.0:
                clean[exp] = clean.get(exp, 0.0) + c
        self.terms = dict(sorted(clean.items(), key=lambda kv: (sum(kv[0]), kv[0])))
        if self.terms:
            self._exps = np.array(list(self.terms), dtype=np.int64).reshape(-1, self.q)
            self._coefs = np.array(list(self.terms.values()), dtype=np.float64)
        else:
            self._exps = np.zeros((0, self.q), dtype=np.int64)
            self._coefs = np.zeros(0, dtype=np.float64)

    # construction ---------------------------------------------------------
    @classmethod
    def parse(cls, text: str | float | int, q: int) -> "Polynomial":
        if isinstance(text, (int, float)) and not isinstance(text, bool):
            text = repr(text)
        if not isinstance(text, str):
            raise PolynomialError(f"polynomial must be a string, got {type(text).__name__}")
        poly = _parse_sympy(text, q)
        terms = {}
        for exp, coeff in poly.terms():
            terms[tuple(exp)] = float(coeff)
        return cls(terms, q)

    @classmethod
    def constant(cls, value: float, q: int) -> "Polynomial":
        return cls({(0,) * q: value}, q)

    @classmethod
    def variable(cls, k: int, q: int) -> "Polynomial":
        exp = [0] * q
        exp[k] = 1
        return cls({tuple(exp): 1.0}, q)

    @classmethod
    def zero(cls, q: int) -> "Polynomial":
        return cls({}, q)

    # inspection -----------------------------------------------------------
    @property
    def exps(self) -> np.ndarray:
        return self._exps

    @property
    def coefs(self) -> np.ndarray:
        return self._coefs

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def __repr__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for exp, c in self.terms.items():
            mono = "*".join(
                f"h{k + 1}" + (f"^{e}" if e > 1 else "") for k, e in enumerate(exp) if e
            )
            parts.append(f"{c!r}" + (f"*{mono}" if mono else ""))
        return " + ".join(parts)

    def __eq__(self, other) -> bool:
        return isinstance(other, Polynomial) and self.q == other.q and self.terms == other.terms

    def __hash__(self):
        return hash((self.q, tuple(self.terms.items())))

    # evaluation -----------------------------------------------------------
    def __call__(self, h) -> np.ndarray | float:
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.q:
            raise PolynomialError(f"expected trailing dimension {self.q}, got {h.shape}")
        if not self.terms:
            out = np.zeros(h.shape[:-1])
        else:
            mono = np.prod(h[..., None, :] ** self._exps, axis=-1)
            out = mono @ self._coefs
        return float(out) if out.ndim == 0 else out

    def deriv(self, k: int) -> "Polynomial":
        terms = {}
        for exp, c in self.terms.items():
            if exp[k] > 0:
                e = list(exp)
                e[k] -= 1
                terms[tuple(e)] = c * exp[k]
        return Polynomial(terms, self.q)

    def gradient(self) -> list["Polynomial"]:
        return [self.deriv(k) for k in range(self.q)]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(other, self.q)
        terms = defaultdict(float, self.terms)
        for exp, c in other.terms.items():
            terms[exp] += c
        return Polynomial(terms, self.q)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial({e: -c for e, c in self.terms.items()}, self.q)

    def __sub__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(other, self.q)
        return self + (-other)

    def __rsub__(self, other) -> "Polynomial":
        return (-self) + other

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            return Polynomial({e: c * other for e, c in self.terms.items()}, self.q)
        if other.q != self.q:
            raise PolynomialError("variable count mismatch")
        terms = defaultdict(float)
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                terms[tuple(a + b for a, b in zip(e1, e2))] += c1 * c2
        return Polynomial(terms, self.q)

    __rmul__ = __mul__

    def substitute_affine(self, center: Iterable[float], lin: np.ndarray) -> "Polynomial":
        """Return p(center + lin @ x) as a polynomial in x (same number of variables)."""
        center = np.asarray(center, dtype=float)
        lin = np.asarray(lin, dtype=float)
        q = self.q
        images = [
            Polynomial({tuple(int(m == l) for m in range(q)): lin[k, l] for l in range(q)}, q)
            + float(center[k])
            for k in range(q)
        ]
        powers: list[dict[int, Polynomial]] = [{0: Polynomial.constant(1.0, q)} for _ in range(q)]

        def power(k: int, e: int) -> Polynomial:
            cache = powers[k]
            if e not in cache:
                cache[e] = power(k, e - 1) * images[k]
            return cache[e]

        out = Polynomial.zero(q)
        for exp, c in self.terms.items():
            term = Polynomial.constant(c, q)
            for k, e in enumerate(exp):
                if e:
                    term = term * power(k, e)
            out = out + term
        return out

    def taylor_coefficient(self, alpha: tuple[int, ...]) -> float:
        return self.terms.get(tuple(alpha), 0.0)
