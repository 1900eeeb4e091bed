import numpy as np
import pytest

from slak.tensor import RngStream


@pytest.fixture
def stream():
    return RngStream(1234)


@pytest.fixture
def gen():
    return np.random.default_rng(99)


def brute_conv(x, w, b=None, stride=1, dilation=1, pads=(0, 0, 0, 0), groups=1):
    """Seven nested loops; the slowest and most obvious convolution there is."""
    B, C, H, W = x.shape
    O, cig, kh, kw = w.shape
    pt, pb, pl, pr = pads
    xp = np.zeros((B, C, H + pt + pb, W + pl + pr), dtype=np.float64)
    xp[:, :, pt:pt + H, pl:pl + W] = x
    ho = (H + pt + pb - dilation * (kh - 1) - 1) // stride + 1
    wo = (W + pl + pr - dilation * (kw - 1) - 1) // stride + 1
    cog = O // groups
    out = np.zeros((B, O, ho, wo))
    for n in range(B):
        for o in range(O):
            g = o // cog
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0
                    for ci in range(cig):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, ci, i, j] * xp[n, g * cig + ci, r * stride + i * dilation,
                                                           c * stride + j * dilation]
                    out[n, o, r, c] = acc + (0.0 if b is None else b[o])
    return out


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
