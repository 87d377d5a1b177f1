"""Mittag-Leffler function by its power series in extended precision."""
import mpmath as mp


def mittag_leffler(alpha, z, dps=40):
    """E_alpha(z) = sum_k z^k / Gamma(alpha k + 1)."""
    with mp.workdps(dps):
        z = mp.mpf(z)
        total, k = mp.mpf(0), 0
        while True:
            term = z**k / mp.gamma(alpha * k + 1)
            total += term
            if k > 10 and abs(term) < mp.mpf(10) ** (-dps + 5):
                break
            k += 1
        return float(total)
