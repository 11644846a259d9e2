import numpy as np
import pytest

from fpgaconv.golden import BiasVector, KernelTensor4D, QuantTensor3D

ACCEPTANCE_LINES = []


def brute_conv(image, kernels, bias):
    """Seven nested loops over plain Python ints; shares no code with the library."""
    C, H, W = image.shape
    K = kernels.shape[0]
    img = image.tolist()
    ker = kernels.tolist()
    b = [int(x) for x in bias]
    out = [[[0] * (W - 2) for _ in range(H - 2)] for _ in range(K)]
    for k in range(K):
        for i in range(H - 2):
            for j in range(W - 2):
                acc = b[k]
                for d in range(C):
                    for m in range(3):
                        for n in range(3):
                            acc += img[d][i + m][j + n] * ker[k][d][m][n]
                out[k][i][j] = acc
    return np.array(out, dtype=np.int64)


def random_layer(rng, H, W, C, K, bias_bound=2**15):
    image = QuantTensor3D(rng.integers(-128, 128, size=(C, H, W)))
    kernels = KernelTensor4D(rng.integers(-128, 128, size=(K, C, 3, 3)))
    bias = BiasVector(rng.integers(-bias_bound, bias_bound + 1, size=K))
    return image, kernels, bias


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report_criterion():
    def record(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
