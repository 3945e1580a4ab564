"""Exception types shared across the package."""


class GauntletError(Exception):
    """Base class for all package errors."""


class ConfigError(GauntletError):
    """Invalid configuration or constructor arguments."""


class InvalidSelectionError(GauntletError):
    """A submitted selection references unknown tile ids or is malformed."""


class ExpiredChallengeError(GauntletError):
    """The challenge (or the current round's payload) is past its deadline."""


class BlockedError(GauntletError):
    """A request was refused by a rate gate.

    ``message`` carries the exact client-visible error string.
    """

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class PoolError(GauntletError):
    """Tile pool cannot satisfy a draw request."""
