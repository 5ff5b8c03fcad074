"""Semantic versions and the two constraint forms the resolver accepts."""
from __future__ import annotations

import re
from functools import total_ordering

_SEMVER_RE = re.compile(r"(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)(?:-([0-9A-Za-z-]+(?:\.[0-9A-Za-z-]+)*))?")


class VersionError(ValueError):
    pass


@total_ordering
class Version:
    __slots__ = ("major", "minor", "patch", "pre", "text")

    def __init__(self, text: str):
        m = _SEMVER_RE.fullmatch(text) if isinstance(text, str) else None
        if m is None:
            raise VersionError(f"not a semantic version: {text!r}")
        self.major, self.minor, self.patch = (int(g) for g in m.groups()[:3])
        self.pre = tuple(m.group(4).split(".")) if m.group(4) else ()
        self.text = text

    def _key(self):
        # a release sorts after any of its pre-releases
        pre = tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in self.pre)
        return (self.major, self.minor, self.patch, not self.pre, pre)

    def __eq__(self, other):
        return isinstance(other, Version) and self._key() == other._key()

    def __lt__(self, other):
        return self._key() < other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        return f"Version({self.text!r})"

    def __str__(self):
        return self.text


def is_semver(text: str) -> bool:
    return isinstance(text, str) and _SEMVER_RE.fullmatch(text) is not None


def matches(constraint: str, version: str | Version) -> bool:
    """Exact (``1.2.3`` / ``=1.2.3``), caret (``^1.2.3``) or any release (``*``)."""
    v = version if isinstance(version, Version) else Version(version)
    c = constraint.strip()
    if c == "*":
        return not v.pre
    if c.startswith("^"):
        low = Version(c[1:])
        if v < low:
            return False
        if v.pre and (v.major, v.minor, v.patch) != (low.major, low.minor, low.patch):
            return False
        if low.major > 0:
            return v.major == low.major
        if low.minor > 0:
            return v.major == 0 and v.minor == low.minor
        return (v.major, v.minor, v.patch) == (0, 0, low.patch)
    if c.startswith("="):
        c = c[1:]
    return v == Version(c)


def validate_constraint(constraint: str) -> str:
    c = constraint.strip()
    if c == "*":
        return c
    Version(c[1:] if c[:1] in "^=" else c)
    return c


def highest_matching(constraint: str, versions) -> str | None:
    candidates = [Version(v) for v in versions if is_semver(v) and matches(constraint, v)]
    return str(max(candidates)) if candidates else None
