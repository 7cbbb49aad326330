"""Exception types raised across the package."""


class UWSplatError(Exception):
    pass


class MissingFile(UWSplatError):
    pass


class MalformedLine(UWSplatError):
    def __init__(self, file, line_no, detail=""):
        self.file = str(file)
        self.line_no = line_no
        msg = f"{self.file}:{line_no}: malformed line"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnsupportedCameraModel(UWSplatError):
    pass


class MissingInitialPoints(UWSplatError):
    pass


class SizeMismatch(UWSplatError):
    pass


class UnreadableFile(UWSplatError):
    pass


class VersionMismatch(UWSplatError):
    pass


class DegreeOutOfRange(UWSplatError):
    pass


class DegenerateDirection(UWSplatError):
    pass


class NonFiniteActivation(UWSplatError):
    pass


class ShapeMismatch(UWSplatError):
    pass


class CloudEmptyAfterPrune(UWSplatError):
    pass


class InsufficientDepthVariation(UWSplatError):
    pass


class DivergedLoss(UWSplatError):
    pass


class ConfigError(UWSplatError):
    pass


class NoValidPixels(UWSplatError):
    pass
