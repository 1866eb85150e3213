import numpy as np
import pytest

from marrowcast.phantom import PhantomParams, generate_case


def small_params(seed=0, **kw):
    """A coarse phantom that generates in well under a second."""
    base = dict(seed=seed, dims=(48, 48, 12), spacing=(8.0, 8.0, 12.0))
    base.update(kw)
    return PhantomParams(**base)


@pytest.fixture(scope="session")
def small_case():
    return generate_case(small_params(seed=11), "P011")


@pytest.fixture(scope="session")
def desk_case():
    return generate_case(PhantomParams(seed=3), "P003")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(criterion, ok, detail):
        line = f"C{criterion} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
