"""Record backend interactions to a log and serve them back byte-for-byte."""

from __future__ import annotations

import json
import logging
import os
import threading
from typing import Sequence

from .. import errors
from .base import GeneratorBackend, LikelihoodQuery, SequenceLogProb, SignalDistribution, fallback_count_tokens, fingerprint
from .mock import ScriptedBackend

log = logging.getLogger(__name__)


class RecordingBackend:
    """Pass-through wrapper that remembers every request/response pair."""

    def __init__(self, inner: GeneratorBackend):
        self.inner = inner
        self.records: dict[str, dict] = {}
        self._lock = threading.Lock()

    def _keep(self, fp: str, method: str, response) -> None:
        with self._lock:
            self.records[fp] = {"fp": fp, "method": method, "response": response}

    def _call(self, fp: str, method: str, fn, encode):
        try:
            result = fn()
        except errors.BackendError as exc:
            self._keep(fp, method, {"error": type(exc).__name__, "message": str(exc)})
            raise
        self._keep(fp, method, encode(result))
        return result

    def count_tokens(self, text: str) -> int:
        fp = fingerprint("count_tokens", text=text)
        return self._call(fp, "count_tokens", lambda: self.inner.count_tokens(text), lambda r: r)

    def sequence_logprob(self, q: LikelihoodQuery) -> SequenceLogProb:
        fp = fingerprint("sequence_logprob", prompt=q.prompt, target=q.target)
        return self._call(
            fp, "sequence_logprob", lambda: self.inner.sequence_logprob(q),
            lambda r: {"total": r.total, "per_token": list(r.per_token)},
        )

    def next_token_distribution(self, prompt: str, candidates: Sequence[str]) -> SignalDistribution:
        fp = fingerprint("next_token_distribution", prompt=prompt, candidates=list(candidates))
        return self._call(
            fp, "next_token_distribution", lambda: self.inner.next_token_distribution(prompt, candidates), dict
        )

    def complete(self, prompt: str, max_tokens: int, stop: Sequence[str] = ()) -> str:
        fp = fingerprint("complete", prompt=prompt, max_tokens=max_tokens, stop=list(stop))
        return self._call(fp, "complete", lambda: self.inner.complete(prompt, max_tokens, stop), lambda r: r)

    def save(self, path: str | os.PathLike) -> int:
        with open(path, "w", encoding="utf-8") as fh:
            for fp in sorted(self.records):
                fh.write(json.dumps(self.records[fp], sort_keys=True) + "\n")
        return len(self.records)


class ReplayBackend(ScriptedBackend):
    """Serves a recording; any request absent from it is an unavailability error."""

    def __init__(self, records: dict[str, dict]):
        script = {}
        self.counts: dict[str, int] = {}
        for fp, rec in records.items():
            resp = rec["response"]
            if rec["method"] == "count_tokens":
                self.counts[fp] = int(resp)
                continue
            if isinstance(resp, dict) and "error" in resp:
                cls = getattr(errors, resp["error"], errors.BackendError)
                resp = cls(resp["message"])
            script[fp] = resp
        super().__init__(script)
        self._warned = False

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ReplayBackend":
        records = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    records[rec["fp"]] = rec
        return cls(records)

    def count_tokens(self, text: str) -> int:
        fp = fingerprint("count_tokens", text=text)
        if fp in self.counts:
            return self.counts[fp]
        if self.counts and not self._warned:
            log.warning("token count not in recording; using local approximation")
            self._warned = True
        return fallback_count_tokens(text)
