class ReasonBenchError(RuntimeError):
    """Base class for every error raised by reasonbench."""


class ConfigError(ReasonBenchError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ContractViolation(ReasonBenchError):
    pass


# backend errors.
class BackendError(ReasonBenchError):
    pass


class BackendTransportError(BackendError):
    """Network-level failure; raised once every attempt has been spent."""

    def __init__(self, message, attempts):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class BackendResponseError(BackendError):
    pass


class ScriptMissError(BackendError):
    def __init__(self, key):
        super().__init__(f"scripted backend has no entry for key {key!r}")
        self.key = key


class ScriptParseError(ReasonBenchError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


# workflow errors.
class WorkflowFailure(ReasonBenchError):
    """
    A workflow stage failed. Carries the partial transcript (status 'failed')
    so it can be persisted for post-mortem.
    """

    def __init__(self, task_id, stage, transcript, cause):
        super().__init__(f"task {task_id}: stage '{stage}' failed: {cause}")
        self.task_id = task_id
        self.stage = stage
        self.transcript = transcript
        self.cause = cause


class DegeneratePlanError(WorkflowFailure):
    def __init__(self, task_id, transcript):
        super().__init__(task_id, 'plan', transcript, 'degenerate plan: the planner returned no text')


# judging errors.
class JudgeReplyError(ReasonBenchError):
    def __init__(self, message, raw_reply):
        super().__init__(f"{message}; raw reply: {raw_reply!r}")
        self.raw_reply = raw_reply


class SandboxError(ReasonBenchError):
    pass


# mimebench errors.
class OptionFormatError(ReasonBenchError):
    def __init__(self, item_id, raw_reply):
        super().__init__(f"item {item_id}: option reply is missing labels A-D")
        self.item_id = item_id
        self.raw_reply = raw_reply


class CriteriaError(ReasonBenchError):
    pass


class OptionScoreError(ReasonBenchError):
    def __init__(self, message, raw_reply):
        super().__init__(f"{message}; raw reply: {raw_reply!r}")
        self.raw_reply = raw_reply


# role isolation / analytics errors.
class CacheMissError(ReasonBenchError):
    def __init__(self, key):
        super().__init__(f"artifact cache has no entry for {key}")
        self.key = key


class BinSpecError(ReasonBenchError):
    pass
