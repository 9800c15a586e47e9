class HarPairError(Exception):
    """Base class for all package errors."""


class DatasetError(HarPairError):
    pass


class ParseError(DatasetError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ConfigError(HarPairError):
    pass


class ShapeError(HarPairError, ValueError):
    pass


class PairConstructionError(HarPairError):
    pass


class EmptySubsetError(HarPairError, ValueError):
    pass


class FreezeViolation(HarPairError, RuntimeError):
    pass
