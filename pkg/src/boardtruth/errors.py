"""Exception hierarchy shared by all modules."""


class BoardTruthError(Exception):
    """Base class; ``code`` is the machine-readable name reported by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


class NonPositiveDepth(BoardTruthError, ValueError):
    pass


# scene_data
class ParseError(BoardTruthError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class UnknownMarker(BoardTruthError, KeyError):
    pass


class DuplicateObservation(BoardTruthError, ValueError):
    pass


class NonMonotoneTimestamps(BoardTruthError, ValueError):
    pass


# pnp
class DegenerateConfiguration(BoardTruthError, ValueError):
    pass


class Divergence(BoardTruthError, RuntimeError):
    pass


class NoKnownBoards(BoardTruthError, ValueError):
    pass


# pose graph
class EmptySamples(BoardTruthError, ValueError):
    pass


class DisconnectedGraph(BoardTruthError, ValueError):
    def __init__(self, unreachable):
        self.unreachable = sorted(unreachable)
        super().__init__(f"boards not connected to the reference: {self.unreachable}")


class DegenerateAxis(BoardTruthError, ValueError):
    pass


# least squares
class NonFiniteResidual(BoardTruthError, FloatingPointError):
    pass


class SingularNormalEquations(BoardTruthError, ArithmeticError):
    pass


class UnconstrainedExtrinsic(BoardTruthError, ValueError):
    pass


# depth model
class InsufficientSamples(BoardTruthError, ValueError):
    pass


class CollapsedComponent(BoardTruthError, ArithmeticError):
    pass


# evaluation
class NoMatches(BoardTruthError, ValueError):
    pass


class DegenerateGeometry(BoardTruthError, ValueError):
    pass


class BehindCamera(BoardTruthError, ValueError):
    pass


# synth
class EmptyVisibility(BoardTruthError, ValueError):
    pass
