"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, sign, domain)."""


class EnumerationBudgetExceeded(RuntimeError):
    """A lattice enumeration would visit more points than its budget allows."""


class OutOfSupportError(ValueError):
    """A lattice point falls outside the support modelled by a prior."""


class IdxFormatError(ValueError):
    """Malformed IDX file."""


class CheckpointError(ValueError):
    """A checkpoint or codes file could not be parsed."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""
