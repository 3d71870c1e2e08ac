from fractions import Fraction


def exact(x) -> Fraction:
    """Decimal value of ``x`` as written (0.9 -> 9/10, not the nearest double)."""
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    return Fraction(repr(float(x)))
