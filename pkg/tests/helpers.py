import numpy as np


def central_difference(f, x0, h=1e-5):
    """Gradient of scalar f at x0 by central differences, one coordinate at a time."""
    x = np.array(x0, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


ACCEPTANCE_LINES = []


def record(number, title, passed, detail):
    """Store one acceptance line; conftest prints them after the run."""
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
