"""Smoke test for the ellembed_py extension module.

Build and install it first, e.g.

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml
"""
import math

import ellembed_py as ee


def close(a, b, tol=1e-8):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    # Diracs: W2 is the Euclidean distance
    a = ee.EllipticalPoint.dirac([0.0, 0.0])
    b = ee.EllipticalPoint.dirac([3.0, 4.0])
    assert close(ee.w2_sq(a, b), 25.0)

    # diagonal scales: Bures equals Hellinger between the diagonals
    bs = ee.bures_sq([[4.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 9.0]])
    assert close(bs, (2 - 1) ** 2 + (1 - 3) ** 2, 1e-6)

    y, z, res = ee.newton_schulz([[4.0, 0.0], [0.0, 9.0]])
    assert close(y[0][0], 2.0, 1e-6) and close(z[1][1], 1.0 / 3.0, 1e-6) and res < 1e-6

    t = ee.transport_map([[1.0, 0.0], [0.0, 1.0]], [[4.0, 0.0], [0.0, 9.0]])
    assert close(t[0][0], 2.0, 1e-6) and close(t[1][1], 3.0, 1e-6)

    p = ee.EllipticalPoint([1.0, 0.0], [[1.0, 0.0], [0.0, 0.5]], 0.01)
    q = ee.EllipticalPoint([0.0, 1.0], [[0.5, 0.2], [0.0, 1.0]], 0.01)
    mid = ee.geodesic_point(p, q, 0.5)
    d_pq = math.sqrt(ee.w2_sq(p, q))
    assert close(math.sqrt(ee.w2_sq(p, mid)), d_pq / 2, 1e-5)
    assert ee.polarization(p, p) > 0
    # sum of a mean cosine and a scale cosine
    assert -2.0 <= ee.cosine_mixture(p, q) <= 2.0
    assert close(ee.spearman([1, 2, 3], [3, 1, 2]), -0.5)

    d = [[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]]
    points, log = ee.fit_mds(d, dim=2, iters=200, lr=0.1)
    assert len(points) == 3 and log[-1] < log[0]

    try:
        ee.w2_sq(a, ee.EllipticalPoint.dirac([1.0, 2.0, 3.0]))
    except ee.EllembedError:
        pass
    else:
        raise AssertionError("dimension mismatch must raise")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
