"""Exception types raised across the package."""


class RsdgcError(Exception):
    pass


class ShapeMismatch(RsdgcError, ValueError):
    pass


class IndexMismatch(RsdgcError, IndexError):
    pass


class NonFinite(RsdgcError, ValueError):
    pass


class EmptyModel(RsdgcError, ValueError):
    pass


class EmptyLedger(RsdgcError, ValueError):
    pass


class DivergedLoss(RsdgcError, FloatingPointError):
    pass


class ConfigError(RsdgcError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
