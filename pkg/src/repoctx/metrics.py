"""Reference-based completion metrics: exact match and edit similarity."""

from __future__ import annotations


def normalize(text: str) -> str:
    """Strip each line's edges and drop blank lines at either end."""
    lines = [line.strip() for line in text.split("\n")]
    while lines and not lines[0]:
        lines.pop(0)
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def exact_match(pred: str, ref: str) -> bool:
    return normalize(pred) == normalize(ref)


def edit_similarity(pred: str, ref: str, normalized: bool = True) -> float:
    if normalized:
        pred, ref = normalize(pred), normalize(ref)
    longest = max(len(pred), len(ref))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(pred, ref) / longest
