import random

import pytest

from ccnsim.crypto import KeyRegistry, sign
from ccnsim.names import parse_name
from ccnsim.router import ContentObject, Interest, Router, RouterConfig


@pytest.fixture
def registry():
    return KeyRegistry()


@pytest.fixture
def make_obj(registry):
    key = registry.register("producer", random.Random(0))

    def make(text, payload=b"data", **kw):
        nm = parse_name(text)
        return ContentObject(nm, payload, sign(registry, key, nm, payload), **kw)

    return make


@pytest.fixture
def make_router(registry):
    def make(**kw):
        r = Router("r", RouterConfig(**kw), registry)
        r.fib.add(parse_name("/"), 9)
        return r

    return make


_nonce = iter(range(1, 10**9))


def interest(text, **kw):
    return Interest(parse_name(text), nonce=next(_nonce).to_bytes(8, "big"), **kw)


# one pass/fail line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    def report(criterion: str, passed: bool, detail: str = ""):
        line = f"{criterion}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
