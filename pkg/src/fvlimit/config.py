"""TOML model/run configuration: parsing, overrides, canonical hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import (
    Circle,
    Dispersal,
    FiniteSet,
    ImmigrationLaw,
    Interval,
    ModelError,
    ModelSpec,
    PositionTerm,
    Sphere,
)
from .polynomial import Polynomial, PolynomialError


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending field."""


def shipped_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("fvlimit").joinpath("configs").iterdir()
                  if p.name.endswith(".toml"))


def shipped_config_path(name: str) -> Path:
    p = resources.files("fvlimit").joinpath("configs", f"{name}.toml")
    if not p.is_file():
        raise ConfigError(f"no shipped config named {name!r}; available: {', '.join(shipped_configs())}")
    return Path(str(p))


def load_raw(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists() and not path.suffix:
        path = shipped_config_path(str(path))
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[tuple[str, str]]) -> dict:
    """Set dotted keys, e.g. ``("simulation.N", "400")``; values are read as TOML literals."""
    out = copy.deepcopy(raw)
    for key, value in overrides:
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key}: {p} is not a table")
            node = nxt
        node[parts[-1]] = _parse_value(value)
    return out


def canonical_json(raw: dict) -> str:
    return json.dumps(raw, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# typed field access with path-qualified errors
# --------------------------------------------------------------------------


def _num(value, where: str, positive: bool = False, nonneg: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    try:
        x = float(value)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if positive and not x > 0:
        raise ConfigError(f"{where}: must be positive")
    if nonneg and x < 0:
        raise ConfigError(f"{where}: must be nonnegative")
    return x


def _int(value, where: str, lo: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{where}: must be >= {lo}")
    return value


def _poly(value, q: int, where: str) -> Polynomial:
    try:
        return Polynomial.parse(value, q)
    except PolynomialError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _get(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return table[key]


def _type_index(value, q: int, where: str) -> int:
    i = _int(value, where, 1)
    if i > q:
        raise ConfigError(f"{where}: type index {i} exceeds q={q}")
    return i - 1


def _domain(raw: dict, q: int) -> FiniteSet | Circle | Sphere | Interval:
    d = _get(raw, "domain", "<root>")
    kind = _get(d, "kind", "domain")
    if kind == "finite":
        K = _int(_get(d, "K", "domain"), "domain.K", 1)
        mig = d.get("migration")
        if mig is None:
            mats = tuple(tuple((0.0,) * K for _ in range(K)) for _ in range(q))
        else:
            if not isinstance(mig, list) or len(mig) != q:
                raise ConfigError(f"domain.migration: need {q} matrices (one per type)")
            mats = tuple(
                tuple(tuple(_num(x, f"domain.migration[{i}][{r}]") for x in row) for r, row in enumerate(m))
                for i, m in enumerate(mig)
            )
        return FiniteSet(K, mats)
    diff = d.get("diffusion")
    if not isinstance(diff, list) or len(diff) != q:
        raise ConfigError(f"domain.diffusion: need a list of {q} coefficients")
    diff = tuple(_num(x, f"domain.diffusion[{k}]", positive=True) for k, x in enumerate(diff))
    if kind == "circle":
        return Circle(_num(d.get("circumference", 1.0), "domain.circumference", positive=True), diff)
    if kind == "sphere":
        return Sphere(_num(d.get("radius", 1.0), "domain.radius", positive=True), diff)
    if kind == "interval":
        return Interval(diff)
    raise ConfigError(f"domain.kind: unknown kind {kind!r} (finite, circle, sphere, interval)")


def build_spec(raw: dict) -> ModelSpec:
    q = _int(_get(raw, "q", "<root>"), "q", 1)
    domain = _domain(raw, q)
    r = _get(raw, "rates", "<root>")
    beta_raw = _get(r, "beta", "rates")
    if not isinstance(beta_raw, list) or len(beta_raw) != q or any(
        not isinstance(row, list) or len(row) != q for row in beta_raw
    ):
        raise ConfigError(f"rates.beta: need a {q}x{q} table of polynomial strings")
    beta = tuple(
        tuple(_poly(x, q, f"rates.beta[{i}][{j}]") for j, x in enumerate(row)) for i, row in enumerate(beta_raw)
    )
    rho_raw = _get(r, "rho", "rates")
    if not isinstance(rho_raw, list) or len(rho_raw) != q:
        raise ConfigError(f"rates.rho: need {q} polynomial strings")
    rho = tuple(_poly(x, q, f"rates.rho[{i}]") for i, x in enumerate(rho_raw))
    kappa = ()
    if "kappa" in r:
        if not isinstance(r["kappa"], list) or len(r["kappa"]) != q:
            raise ConfigError(f"rates.kappa: need {q} polynomial strings")
        kappa = tuple(_poly(x, q, f"rates.kappa[{i}]") for i, x in enumerate(r["kappa"]))
    kappa_growth = _num(r.get("kappa_growth", 0), "rates.kappa_growth", nonneg=True)

    b_s = [[None] * q for _ in range(q)]
    d_s = [None] * q
    for n, t in enumerate(raw.get("position", [])):
        where = f"position[{n}]"
        target = _get(t, "target", where)
        bound = _num(_get(t, "bound", where), f"{where}.bound", nonneg=True)
        terms_raw = _get(t, "terms", where)
        terms = tuple(
            (str(_get(e, "basis", f"{where}.terms[{k}]")), _poly(_get(e, "coef", f"{where}.terms[{k}]"), q,
                                                                 f"{where}.terms[{k}].coef"))
            for k, e in enumerate(terms_raw)
        )
        term = PositionTerm(bound, terms)
        i = _type_index(_get(t, "i", where), q, f"{where}.i")
        if target == "b_s":
            j = _type_index(_get(t, "j", where), q, f"{where}.j")
            b_s[i][j] = term
        elif target == "d_s":
            d_s[i] = term
        else:
            raise ConfigError(f"{where}.target: expected 'b_s' or 'd_s'")

    disp = [[None] * q for _ in range(q)]
    for n, t in enumerate(raw.get("dispersal", [])):
        where = f"dispersal[{n}]"
        i = _type_index(_get(t, "i", where), q, f"{where}.i")
        j = _type_index(_get(t, "j", where), q, f"{where}.j")
        kind = _get(t, "kind", where)
        mat = t.get("matrix")
        disp[i][j] = Dispersal(
            kind=kind,
            c=_num(t.get("c", 0), f"{where}.c", nonneg=True),
            s=_num(t.get("s", 0), f"{where}.s", nonneg=True),
            kernel=t.get("kernel", "matrix" if mat is not None else "uniform"),
            matrix=None if mat is None else tuple(tuple(_num(x, f"{where}.matrix") for x in row) for row in mat),
            new_clan=bool(t.get("new_clan", False)),
        )

    laws = [ImmigrationLaw()] * q
    for n, t in enumerate(raw.get("immigration", [])):
        where = f"immigration[{n}]"
        i = _type_index(_get(t, "type", where), q, f"{where}.type")
        w = t.get("weights")
        m = t.get("mean")
        laws[i] = ImmigrationLaw(
            kind=t.get("law", "uniform"),
            weights=None if w is None else tuple(_num(x, f"{where}.weights") for x in w),
            mean=None if m is None else tuple(_num(x, f"{where}.mean") for x in m),
            concentration=_num(t.get("concentration", 0), f"{where}.concentration", nonneg=True),
        )

    spec = ModelSpec(
        q=q,
        domain=domain,
        beta=beta,
        rho=rho,
        H_max=_num(_get(raw, "H_max", "<root>"), "H_max", positive=True),
        b_s=tuple(tuple(r_) for r_ in b_s),
        d_s=tuple(d_s),
        dispersal=tuple(tuple(r_) for r_ in disp),
        kappa=kappa,
        immigration=tuple(laws),
        kappa_growth=kappa_growth,
        track_clans=bool(raw.get("clans", {}).get("track", False)),
        name=str(raw.get("name", "model")),
    )
    try:
        spec.structure_check()
    except ModelError as exc:
        raise ConfigError(str(exc)) from None
    return spec


def section(raw: dict, name: str) -> dict:
    s = raw.get(name, {})
    if not isinstance(s, dict):
        raise ConfigError(f"{name}: expected a table")
    return s


def load(path: str | Path, overrides: list[tuple[str, str]] = ()) -> tuple[dict, ModelSpec]:
    raw = apply_overrides(load_raw(path), list(overrides))
    return raw, build_spec(raw)
