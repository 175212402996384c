import numpy as np
import pytest

from convllava.tensor import set_deterministic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def deterministic():
    set_deterministic(True)
    yield
    set_deterministic(False)


def direct_conv_oracle(x, w, b=None, stride=1, padding=0, groups=1):
    """Scalar loops over every output element and kernel tap."""
    bsz, cin, h, wd = x.shape
    cout, cig, k, _ = w.shape
    cog = cout // groups
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            grp = o // cog
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cig):
                        ci = grp * cig + c
                        for di in range(k):
                            for dj in range(k):
                                yi = i * stride + di - padding
                                xj = j * stride + dj - padding
                                if 0 <= yi < h and 0 <= xj < wd:
                                    acc += float(x[n, ci, yi, xj]) * float(w[o, c, di, dj])
                    out[n, o, i, j] = acc
    return out
