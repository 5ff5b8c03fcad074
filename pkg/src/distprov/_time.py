"""RFC 3339 UTC timestamps at one-second resolution."""
from __future__ import annotations

import os
from datetime import datetime, timezone

_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


def format_time(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).strftime(_FORMAT)


def parse_time(text: str) -> datetime:
    try:
        return datetime.strptime(text, _FORMAT).replace(tzinfo=timezone.utc)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"not an RFC 3339 UTC timestamp: {text!r}") from exc


def utc_now() -> str:
    """Current time, honouring SOURCE_DATE_EPOCH for reproducible builds."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return format_time(datetime.fromtimestamp(int(epoch), tz=timezone.utc))
    return format_time(datetime.now(timezone.utc))


def seconds_between(earlier: str, later: str) -> float:
    return (parse_time(later) - parse_time(earlier)).total_seconds()
