"""Exception hierarchy. Every error carries a short machine-readable code."""


class MetaTraError(Exception):
    code = "error"


class ConfigError(MetaTraError, ValueError):
    code = "config"


class UsageError(MetaTraError, ValueError):
    code = "usage"


class DataError(MetaTraError, ValueError):
    code = "data"


class ParseError(DataError):
    code = "parse"

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class NumericError(MetaTraError, FloatingPointError):
    code = "numeric"
