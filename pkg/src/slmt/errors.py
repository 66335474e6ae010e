"""Exception types shared across the package.

The CLI maps these onto its exit codes: UsageError -> 1, DataError -> 2,
NumericalAbort -> 3.
"""


class UsageError(ValueError):
    """Invalid flags or flag combinations."""


class DataError(ValueError):
    """Bad or inconsistent input data (corpora, files, ids, configs)."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss.

    Carries the component losses that were live when the abort fired so the
    run log has something to diagnose.
    """

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})
