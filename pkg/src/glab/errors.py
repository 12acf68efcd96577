"""Exception hierarchy shared by every module."""


class GlabError(Exception):
    pass


class ParameterError(GlabError, ValueError):
    """Invalid argument or configuration value."""


class ScheduleIndexError(GlabError, IndexError):
    pass


class SingularityError(GlabError, ArithmeticError):
    """A formula would divide by a vanishing signal or noise level."""


class DegenerateStepError(ParameterError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class InvariantError(GlabError):
    """A hard numerical invariant was violated at run time."""


class StepError(GlabError):
    """Wraps an error raised inside a solver loop with the offending step index."""

    def __init__(self, step: int, t: int, cause: Exception):
        super().__init__(f"step {step} (t={t}): {cause}")
        self.step = step
        self.t = t
        self.cause = cause


class ConfigError(ParameterError):
    """Malformed or invalid experiment configuration; carries the line or key at fault."""

    def __init__(self, message: str, *, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else (f"{key}: " if key else "")
        super().__init__(where + message)
        self.line = line
        self.key = key
