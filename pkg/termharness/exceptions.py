class TermharnessError(Exception):
    """Base class for all errors that the pipeline reports to its caller.

    The class name doubles as the stable ``kind`` of the error; the command line
    interface prints ``to_dict()`` as a machine-readable error object. Keyword
    arguments given to the constructor end up as additional fields of that object.
    """

    def __init__(self, message="", **details):
        super().__init__(message)
        self.message = message
        self.details = details

    @property
    def kind(self):
        return type(self).__name__

    def to_dict(self):
        return {"kind": self.kind, "message": self.message, **self.details}


class WorkdirMissing(TermharnessError):
    pass


class SpawnFailure(TermharnessError):
    pass


class GatewayFailure(TermharnessError):
    pass


class ScriptExhausted(TermharnessError):
    pass


class ScriptAssertionFailure(TermharnessError):
    pass


class PlanParseFailure(TermharnessError):
    pass


class GradeParseFailure(TermharnessError):
    pass


class JudgeParseFailure(TermharnessError):
    pass


class PatchApplyFailure(TermharnessError):
    pass


class WorkspaceSetupFailure(TermharnessError):
    pass


class ManifestError(TermharnessError):
    pass


class ConfigConflict(TermharnessError):
    pass


class ConfigError(TermharnessError):
    pass


class NonFiniteInput(TermharnessError):
    pass


class MissingFinalAnswer(TermharnessError):
    pass


class NoGroupKept(TermharnessError):
    pass
