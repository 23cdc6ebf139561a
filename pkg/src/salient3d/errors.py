"""Exception hierarchy shared by all modules."""


class Salient3DError(Exception):
    """Base class for contract violations raised by this package."""


class InvalidArgument(Salient3DError, ValueError):
    pass


class ParseError(Salient3DError):
    def __init__(self, file, reason="missing or unreadable"):
        super().__init__(f"{file}: {reason}")
        self.file = file


class FormatError(Salient3DError):
    pass


class IntegrityError(Salient3DError):
    def __init__(self, what, reason=""):
        msg = f"integrity violation at {what}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.what = what


class UnsupportedCamera(Salient3DError):
    pass


class BehindCamera(Salient3DError):
    pass


class MissingFrame(Salient3DError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyInput(Salient3DError):
    pass


class DegenerateFeature(Salient3DError):
    pass


class DisconnectedVertex(Salient3DError):
    def __init__(self, index):
        super().__init__(f"vertex {index} has zero degree")
        self.index = index


class InvalidPartition(Salient3DError):
    pass


class NumericalFailure(Salient3DError):
    pass


class NoPlaneFound(Salient3DError):
    pass


class DegenerateGeometry(Salient3DError):
    pass
