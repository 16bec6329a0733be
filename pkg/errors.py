"""
Exception hierarchy.

Every error the pipeline raises on purpose derives from `ProvHuntError`. The CLI
maps the two families to exit codes in one place (see `main.run`):

- `ValidationFailure` -> exit 1 (bad input, bad flags, missing files)
- `RuntimeFailure`    -> exit 2 (the work itself failed)

Messages start with the offending field or file, e.g. ``"id: unknown node 'p9'"``.
"""


class ProvHuntError(Exception):
    exit_code = 2


# --- VALIDATION (exit 1) ---
class ValidationFailure(ProvHuntError):
    exit_code = 1


class MissingFileError(ValidationFailure):
    pass


class SchemaError(ValidationFailure):
    pass


class DuplicateNodeError(ValidationFailure):
    pass


class UnknownNodeError(ValidationFailure):
    pass


class IllegalRelationError(ValidationFailure):
    pass


class IllegalAttributeError(ValidationFailure):
    pass


class EmptyGraphError(ValidationFailure):
    pass


class EmptyBatchError(ValidationFailure):
    pass


class EmptyCorpusError(ValidationFailure):
    pass


class ShapeMismatchError(ValidationFailure):
    pass


class SingleClassError(ValidationFailure):
    pass


class NotAProcessError(ValidationFailure):
    pass


class ScoreRangeError(ValidationFailure):
    pass


# --- RUNTIME (exit 2) ---
class RuntimeFailure(ProvHuntError):
    exit_code = 2


class StreamReadError(RuntimeFailure):
    pass


class EmptySeedError(RuntimeFailure):
    pass


class NoiseGuardExhaustedError(RuntimeFailure):
    pass


class InsufficientSamplesError(RuntimeFailure):
    pass


class NonFiniteGradientError(RuntimeFailure):
    def __init__(self, parameter: str, message: str | None = None):
        self.parameter = parameter
        super().__init__(message or f"{parameter}: non-finite value during backpropagation")


class TrainingDivergedError(RuntimeFailure):
    """Loss went NaN/inf. `last_good_state` holds the parameters from before the bad step."""

    def __init__(self, epoch: int, last_good_state: dict, history: list | None = None):
        self.epoch = epoch
        self.last_good_state = last_good_state
        self.history = history or []
        super().__init__(f"loss: diverged in epoch {epoch}; last good checkpoint kept")
