from .base import (
    GeneratorBackend,
    LikelihoodQuery,
    SequenceLogProb,
    SignalDistribution,
    fallback_count_tokens,
    fingerprint,
    restricted_softmax,
)
from .mock import OverlapOracle, OverlapParams, ScriptedBackend
from .remote import RemoteBackend, RemoteConfig
from .replay import RecordingBackend, ReplayBackend

__all__ = [
    "GeneratorBackend",
    "LikelihoodQuery",
    "OverlapOracle",
    "OverlapParams",
    "RecordingBackend",
    "RemoteBackend",
    "RemoteConfig",
    "ReplayBackend",
    "ScriptedBackend",
    "SequenceLogProb",
    "SignalDistribution",
    "fallback_count_tokens",
    "fingerprint",
    "restricted_softmax",
]
