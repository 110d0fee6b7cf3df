"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class ReproError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class CorpusError(ReproError):
    pass


class NoValidRecords(CorpusError):
    pass


class BackendError(ReproError):
    def __init__(self, message: str, instance_id: str | None = None):
        super().__init__(message)
        self.instance_id = instance_id


class LikelihoodUnavailable(BackendError):
    pass


class SignalUnavailable(BackendError):
    pass


class CompletionUnavailable(BackendError):
    pass


class DegenerateTarget(ReproError):
    pass


class PromptOverflow(ReproError):
    pass


class FormatInapplicable(ReproError):
    pass
