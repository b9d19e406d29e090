"""Exception hierarchy for oftkit."""


class OftError(Exception):
    """Base class for all library errors."""


class DimensionError(OftError, ValueError):
    pass


class NonFiniteError(OftError, ValueError):
    pass


class SingularMatrixError(OftError, ArithmeticError):
    pass


class ZeroNormNeuron(OftError, ValueError):
    """A weight column has (numerically) zero norm and no direction."""


class DegeneratePair(OftError, ValueError):
    """Two normalized neurons coincide, so the energy diverges."""

    def __init__(self, i, j, dist):
        super().__init__(f"neurons {i} and {j} coincide on the sphere (distance {dist:.3e})")
        self.i, self.j, self.dist = i, j, dist


class DivisibilityError(OftError, ValueError):
    def __init__(self, d, r):
        divisors = [k for k in range(1, d + 1) if d % k == 0]
        super().__init__(f"d={d} is not divisible by r={r}; valid block counts: {divisors}")
        self.d, self.r, self.divisors = d, r, divisors


class ModeError(OftError, ValueError):
    pass


class DivergenceError(OftError, ArithmeticError):
    def __init__(self, step, loss):
        super().__init__(f"loss diverged at step {step}: {loss!r}")
        self.step, self.loss = step, loss


class FormatError(OftError):
    """Base for adapter-file parse failures."""


class ChecksumError(FormatError):
    pass


class FormatVersionError(FormatError):
    pass


class CorruptAdapterError(FormatError):
    pass
