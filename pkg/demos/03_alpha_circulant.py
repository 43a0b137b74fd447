"""Anatomy of the alpha-circulant all-at-once time matrix.

Backward Euler over M substeps couples all steps through a lower
bidiagonal matrix B. Replacing the zero in its upper-right corner by
-alpha/dt makes B alpha-circulant, and a scaled Fourier transform
diagonalizes it exactly: B = S diag(d_k) S^{-1}. One all-at-once solve
then costs two FFTs plus M independent shifted spatial solves, at the
price of an O(alpha) perturbation that the waveform iteration corrects.

Small alpha means a small perturbation but a lopsided scaling matrix
(its diagonal spans alpha^0 .. alpha^-(M-1)/M), so round-off grows as
alpha drops. The table below makes that tradeoff concrete.

Run: python3 demos/03_alpha_circulant.py
"""

import numpy as np

from paradiff.allatonce import TimeMatrixB, apply_S, apply_S_inverse


def diag_residual(m: int, dt: float, alpha: float) -> float:
    tm = TimeMatrixB(m, dt, alpha)
    s_mat = apply_S(np.eye(m), alpha)
    s_inv = apply_S_inverse(np.eye(m), alpha)
    rebuilt = (s_mat * tm.eigenvalues()[None, :]) @ s_inv
    b = tm.dense()
    return float(np.linalg.norm(rebuilt - b) / np.linalg.norm(b))


def main():
    m, dt, alpha = 5, 0.1, 0.5
    tm = TimeMatrixB(m, dt, alpha)
    print("dt * B for M = %d, alpha = %.1f (note the corner):" % (m, alpha))
    for row in dt * tm.dense():
        print("   " + "  ".join("%6.2f" % x for x in row))
    print()

    # match eigenvalues greedily: complex sorting splits conjugate pairs
    ref = list(np.linalg.eigvals(tm.dense()))
    worst = 0.0
    for lam in tm.eigenvalues():
        dist = [abs(lam - b) for b in ref]
        j = int(np.argmin(dist))
        worst = max(worst, dist[j])
        ref.pop(j)
    print("closed-form eigenvalues match dense eigvals to %.1e" % worst)
    print()

    print("diagonalization residual ||S D S^-1 - B|| / ||B||:")
    alphas = (0.9, 0.5, 0.1, 0.01, 0.001)
    print("%8s" % "M", *("alpha=%g" % a for a in alphas))
    for m in (8, 32, 128):
        row = [diag_residual(m, 1e-3, a) for a in alphas]
        print("%8d" % m, *("%9.1e" % r for r in row))
    print()
    print("Scaling-matrix spread alpha^-(M-1)/M at M = 128:")
    for a in alphas:
        print("   alpha = %-6g spread = %8.1f" % (a, a ** (-(128 - 1) / 128)))
    print()
    print("Residuals stay near machine precision for moderate alpha and only")
    print("degrade once the scaling spread explodes. In the solver alpha also")
    print("multiplies the window coupling term, so the sweet spot balances")
    print("waveform contraction (small alpha) against round-off (large alpha);")
    print("the defaults use alpha around one half.")


if __name__ == "__main__":
    main()
