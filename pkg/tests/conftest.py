import numpy as np
import pytest

from fvlimit import config


def spec_from(raw: dict):
    return config.build_spec(raw)


def finite_raw(beta, rho, K=2, migration=None, **extra) -> dict:
    q = len(rho)
    raw = {"name": "test", "q": q, "H_max": extra.pop("H_max", 8),
           "domain": {"kind": "finite", "K": K}, "rates": {"beta": beta, "rho": rho}}
    if migration is not None:
        raw["domain"]["migration"] = migration
    raw.update(extra)
    return raw


@pytest.fixture(scope="session")
def shipped():
    cache = {}

    def get(name, overrides=()):
        key = (name, tuple(overrides))
        if key not in cache:
            cache[key] = config.load(name, list(overrides))
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# pass/fail lines from the acceptance suite, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    def emit(number, label, value, target, passed, runtime=None):
        extra = f" ({runtime:.1f} s)" if runtime is not None else ""
        line = f"criterion {number} {label}: {value} [target {target}] {'PASS' if passed else 'FAIL'}{extra}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, end="")
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
