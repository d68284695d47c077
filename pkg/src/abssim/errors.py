class InputError(ValueError):
    """Bad argument shape or value passed to a simulator routine."""


class ConfigError(ValueError):
    """Invalid run configuration.  ``path`` names the offending key."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DivergenceError(ArithmeticError):
    """A model or loss became non-finite.

    ``records`` carries whatever metrics were emitted before the failure so
    callers can persist a partial trajectory.
    """

    def __init__(self, message, round_index=None, records=None):
        self.round_index = round_index
        self.records = list(records) if records is not None else []
        where = f" (round {round_index})" if round_index is not None else ""
        super().__init__(message + where)
