"""Exception types shared across the package."""


class CfAudioError(Exception):
    """Base class for all package errors."""


class ManifestError(CfAudioError):
    """Manifest is malformed or violates an invariant."""


class ManifestParseError(ManifestError):
    """A manifest record could not be parsed.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class MissingAudioError(ManifestError):
    """One or more audio paths in a manifest do not resolve to files."""

    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        listing = ", ".join(self.missing)
        super().__init__(f"{len(self.missing)} missing audio file(s): {listing}")


class DuplicateIdError(ManifestError):
    """Entry ids are not unique within a manifest."""

    def __init__(self, duplicates: list[str]):
        self.duplicates = list(duplicates)
        super().__init__(f"duplicate entry id(s): {', '.join(self.duplicates)}")


class FrontendError(CfAudioError):
    """Audio feature extraction failed a precondition."""


class SampleRateMismatchError(FrontendError):
    def __init__(self, clip_rate: int, config_rate: int):
        super().__init__(
            f"clip sample rate {clip_rate} Hz does not match configured "
            f"{config_rate} Hz; resample before feature extraction"
        )


class EncoderError(CfAudioError):
    """Encoder misuse (empty captions, shape mismatch, bad spec)."""


class LossError(CfAudioError):
    """Loss inputs violate a precondition (shapes, zero vectors, ...)."""


class BackendError(CfAudioError):
    """The LLM backend failed after all transport retries."""


class BackendResponseError(BackendError):
    """The backend replied, but no structured block could be parsed."""


class ConfigError(CfAudioError):
    """Run configuration is invalid (unknown keys, bad values, ...)."""


class ConfigHashMismatchError(ConfigError):
    """An artifact was produced under a different configuration."""

    def __init__(self, expected: str, found: str):
        super().__init__(f"config hash mismatch: expected {expected}, found {found}")


class TrainingError(CfAudioError):
    """Training aborted (non-finite loss, missing counterfactuals, ...)."""


class EvaluationError(CfAudioError):
    """Evaluation inputs violate a precondition."""


class DependencyError(CfAudioError):
    """A pipeline stage is missing a required input artifact."""
