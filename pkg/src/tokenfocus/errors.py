"""Exception types shared across the package."""


class InputError(ValueError):
    """An argument violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """A non-finite value was supplied or produced."""


class DatasetParseError(InputError):
    """Raised when a line-delimited file contains invalid lines.

    ``diagnostics`` holds one ``(line_number, field, reason)`` tuple per
    offending line; line numbers are 1-based.
    """

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        first = self.diagnostics[0]
        more = len(self.diagnostics) - 1
        msg = f"line {first[0]}: {first[1]}: {first[2]}"
        if more:
            msg += f" (+{more} more)"
        super().__init__(msg)
