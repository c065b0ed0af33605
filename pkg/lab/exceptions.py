class ConfigError(ValueError):
    """An experiment config that cannot be parsed or validated.

    ``field`` is the dotted path of the offending key and ``line`` the line of a
    parse failure, when known.
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line


class DatasetFormatError(ValueError):
    pass
