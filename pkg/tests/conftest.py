import numpy as np
import pytest

from vnslab.geometry import Domain, FunctionField


def sine_field(domain: Domain, amps=None) -> FunctionField:
    """Smooth field vanishing on the walls: ``u_c = A_c prod_e sin(pi x_e)``, analytic gradient."""
    d = domain.dim
    amps = np.asarray(amps if amps is not None else [0.3, -0.2, 0.25][:d], float)
    lo, L = domain.lo_arr, domain.lengths

    def func(x):
        s = np.sin(np.pi * (x - lo) / L)
        return np.prod(s, axis=1)[:, None] * amps

    def grad(x):
        arg = np.pi * (x - lo) / L
        s, c = np.sin(arg), np.cos(arg)
        g = np.empty((len(x), d, d))
        for e in range(d):
            part = np.prod(np.delete(s, e, axis=1), axis=1) * c[:, e] * np.pi / L[e]
            g[:, :, e] = part[:, None] * amps
        return g

    return FunctionField(domain, func, grad)


def swirl_field(domain: Domain, amp: float = 0.4) -> FunctionField:
    """Divergence-free 2D swirl ``curl((sin pi x sin pi y)^2)`` scaled by ``amp``."""

    def func(x):
        sx, sy = np.sin(np.pi * x[:, 0]), np.sin(np.pi * x[:, 1])
        cx, cy = np.cos(np.pi * x[:, 0]), np.cos(np.pi * x[:, 1])
        return amp * 2 * np.pi * np.stack([sx * sx * sy * cy, -sx * cx * sy * sy], axis=1)

    return FunctionField(domain, func)


@pytest.fixture
def unit2():
    return Domain.unit(2, (0.5, 0.5))


@pytest.fixture
def unit3():
    return Domain.unit(3, (0.5, 0.5, 0.5))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
