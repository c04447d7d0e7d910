"""Clocks and RFC3339 timestamp helpers.

Every component takes an injectable clock so that schedules and result
maturation can be driven in virtual time.
"""

from __future__ import annotations

import threading
import time
from datetime import date, datetime, timedelta, timezone

UTC = timezone.utc


def utc(year: int, month: int = 1, day: int = 1, hour: int = 0, minute: int = 0, second: int = 0) -> datetime:
    return datetime(year, month, day, hour, minute, second, tzinfo=UTC)


def format_ts(ts: datetime) -> str:
    """Render an aware datetime as RFC3339 with a trailing ``Z`` (second resolution)."""
    if ts.tzinfo is None:
        raise ValueError("naive datetime")
    if ts.tzinfo is not UTC:
        ts = ts.astimezone(UTC)
    return f"{ts.year:04d}-{ts.month:02d}-{ts.day:02d}T{ts.hour:02d}:{ts.minute:02d}:{ts.second:02d}Z"


def parse_ts(text: str) -> datetime:
    if len(text) == 20 and text[19] == "Z" and text[10] == "T":
        # Fast path for the canonical form written by format_ts.
        try:
            return datetime(int(text[0:4]), int(text[5:7]), int(text[8:10]), int(text[11:13]), int(text[14:16]),
                            int(text[17:19]), tzinfo=UTC)
        except ValueError:
            pass
    text = text.strip()
    if text.endswith("Z") or text.endswith("z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp without offset: {text!r}")
    return ts.astimezone(UTC)


def to_epoch(ts: datetime) -> int:
    return int(ts.timestamp())


def from_epoch(seconds: int) -> datetime:
    return datetime.fromtimestamp(int(seconds), tz=UTC)


def age_in_years(birth_date: date, at: datetime) -> float:
    """Age as fractional years (days / 365.25), shared by both feature adapters."""
    return (at.date() - birth_date).days / 365.25


def parse_duration(text: str) -> timedelta:
    """Parse ``30d``, ``12h``, ``15m`` or ``45s`` (also bare seconds)."""
    text = text.strip()
    units = {"d": 86400, "h": 3600, "m": 60, "s": 1}
    if text and text[-1] in units:
        return timedelta(seconds=float(text[:-1]) * units[text[-1]])
    return timedelta(seconds=float(text))


class VirtualClock:
    """A manually advanced clock. Time never moves backwards."""

    def __init__(self, now: datetime):
        if now.tzinfo is None:
            raise ValueError("VirtualClock needs an aware datetime")
        self._now = now
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def set(self, ts: datetime) -> None:
        with self._lock:
            if ts < self._now:
                raise ValueError(f"clock cannot move backwards ({format_ts(ts)} < {format_ts(self._now)})")
            self._now = ts

    def advance(self, delta: timedelta) -> datetime:
        with self._lock:
            self._now = self._now + delta
            return self._now


class WallClock:
    def now(self) -> datetime:
        return datetime.now(tz=UTC).replace(microsecond=0)

    def sleep_until(self, ts: datetime) -> None:
        delay = (ts - self.now()).total_seconds()
        if delay > 0:
            time.sleep(delay)


class PacedClock:
    """Real-time clock anchored at a chosen instant, optionally sped up.

    ``now`` is ``anchor + speed * (elapsed wall time)``, so a simulated world
    whose facts live in the past can be driven at wall-clock pace.
    """

    def __init__(self, anchor: datetime, speed: float = 1.0):
        if anchor.tzinfo is None:
            raise ValueError("PacedClock needs an aware datetime")
        if speed <= 0:
            raise ValueError("speed must be positive")
        self.anchor = anchor
        self.speed = speed
        self._t0 = time.monotonic()

    def now(self) -> datetime:
        elapsed = (time.monotonic() - self._t0) * self.speed
        return (self.anchor + timedelta(seconds=elapsed)).replace(microsecond=0)

    def sleep_until(self, ts: datetime) -> None:
        while True:
            delay = (ts - self.now()).total_seconds() / self.speed
            if delay <= 0:
                return
            time.sleep(min(delay, 0.5))
