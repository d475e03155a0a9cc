"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A precondition on an argument (shape, range, length) was not met."""


class NumericOverflowError(ArithmeticError):
    """A neuron produced a non-finite value."""

    def __init__(self, message, neuron=None):
        super().__init__(message)
        self.neuron = neuron


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class ProtocolError(RuntimeError):
    """A parameter-server exchange broke the synchronization protocol."""


class StaleUpdateError(ProtocolError):
    """A Downpour push was computed against a snapshot older than allowed."""


class GroupAborted(RuntimeError):
    """A worker inside a task group failed; the whole group stopped."""

    def __init__(self, message, group_id=None, worker_id=None):
        super().__init__(message)
        self.group_id = group_id
        self.worker_id = worker_id


class FormatError(ValueError):
    """Malformed IDX, checkpoint or config content."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
