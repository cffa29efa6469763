"""Exception hierarchy shared by every layer of the simulator."""


class MicroserveError(Exception):
    """Base class for all package errors."""


# -- workflow construction -------------------------------------------------

class DslError(MicroserveError):
    pass


class DuplicateModelId(DslError):
    pass


class InvalidPortSpec(DslError):
    pass


class NestedScope(DslError):
    pass


class NoActiveScope(DslError):
    pass


class UnboundRequiredInput(DslError):
    pass


class DtypeMismatch(DslError):
    pass


class UncarriedLoopDependency(DslError):
    pass


class NotPatchable(DslError):
    pass


class NotAnAdapter(DslError):
    pass


class EmptyWorkflow(DslError):
    pass


class CycleDetected(DslError):
    pass


class UnreachableOutput(DslError):
    pass


class DanglingBinding(DslError):
    pass


# -- compilation -----------------------------------------------------------

class CompileError(MicroserveError):
    pass


class PassProducedCycle(CompileError):
    pass


class PassTypeError(CompileError):
    pass


class UnfusableLoop(CompileError):
    pass


class NoLatentInit(CompileError):
    pass


class MultipleLatentInit(CompileError):
    pass


class TargetNotInWorkflow(CompileError):
    pass


class PassOrderError(CompileError):
    pass


class InstantiationError(MicroserveError):
    pass


class MissingInput(InstantiationError):
    pass


class TripCountNonPositive(InstantiationError):
    pass


# -- profiles --------------------------------------------------------------

class ProfileError(MicroserveError):
    pass


class MissingProfile(ProfileError):
    pass


class MonotonicityViolation(ProfileError):
    pass


class BatchExceedsMax(ProfileError):
    pass


class ParallelismExceedsMax(ProfileError):
    pass


# -- runtime ---------------------------------------------------------------

class DuplicateCompletion(MicroserveError):
    pass


class HandleReclaimed(MicroserveError):
    pass


class StreamTerminated(MicroserveError):
    pass


class ActiveConsumers(MicroserveError):
    pass


class ExecutorBusy(MicroserveError):
    pass


class ExecutorFailed(MicroserveError):
    pass


class ModelLargerThanCapacity(MicroserveError):
    pass


class FetchIncomplete(MicroserveError):
    pass


class FootprintExceedsCapacity(MicroserveError):
    pass


class InvariantViolation(MicroserveError):
    """Raised when a run breaks a simulator invariant (CLI exit code 2)."""


# -- harness ---------------------------------------------------------------

class ConfigError(MicroserveError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class CorruptLog(MicroserveError):
    pass
