"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class GapshapError(Exception):
    """Base class for all library errors."""


class ValidationError(GapshapError, ValueError):
    """Input violates a documented invariant (CLI exit code 2)."""


class SpaceParseError(ValidationError):
    """A configuration-space or preset file could not be parsed."""


class StageError(GapshapError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
