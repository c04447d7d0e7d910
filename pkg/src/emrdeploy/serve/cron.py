"""Classic five-field cron expressions at minute resolution (UTC).

Fields are minute, hour, day-of-month, month and day-of-week, each a comma
list of ``*``, ``N``, ``A-B``, optionally with a ``/STEP`` suffix (``N/STEP``
runs from N to the field maximum). Day-of-week accepts 0-7 with both 0 and 7
meaning Sunday. When day-of-month and day-of-week are both restricted (neither
starts with ``*``), a day matches if either does, as in Vixie cron.
"""

from __future__ import annotations

import calendar
from dataclasses import dataclass
from datetime import date, datetime, timedelta

from ..clock import UTC

FIELDS = (("minute", 0, 59), ("hour", 0, 23), ("day-of-month", 1, 31), ("month", 1, 12), ("day-of-week", 0, 7))
# Longest run of years without a February 29 (e.g. 2097-2103), plus slack.
_SEARCH_DAYS = 366 * 9


class CronSyntaxError(ValueError):
    pass


def _number(text: str, name: str, lo: int, hi: int) -> int:
    if not text.isdigit():
        raise CronSyntaxError(f"{name}: {text!r} is not a number")
    value = int(text)
    if not lo <= value <= hi:
        raise CronSyntaxError(f"{name}: {value} outside {lo}-{hi}")
    return value


def _parse_field(text: str, name: str, lo: int, hi: int) -> frozenset[int]:
    if not text:
        raise CronSyntaxError(f"{name}: empty field")
    values: set[int] = set()
    for item in text.split(","):
        base, slash, step_text = item.partition("/")
        step = 1
        if slash:
            step = _number(step_text, name, 1, hi - lo + 1) if step_text else 0
            if step < 1:
                raise CronSyntaxError(f"{name}: bad step in {item!r}")
        if base == "*":
            start, stop = lo, hi
        elif "-" in base:
            a, _, b = base.partition("-")
            start, stop = _number(a, name, lo, hi), _number(b, name, lo, hi)
            if start > stop:
                raise CronSyntaxError(f"{name}: reversed range {base!r}")
        else:
            start = _number(base, name, lo, hi)
            stop = hi if slash else start
        values.update(range(start, stop + 1, step))
    return frozenset(values)


@dataclass(frozen=True)
class CronSchedule:
    expr: str
    minutes: tuple[int, ...]
    hours: tuple[int, ...]
    days: frozenset[int]
    months: frozenset[int]
    weekdays: frozenset[int]  # 0 = Sunday
    day_restricted: bool
    weekday_restricted: bool

    def day_matches(self, d: date) -> bool:
        if d.month not in self.months:
            return False
        dom = d.day in self.days
        dow = (d.weekday() + 1) % 7 in self.weekdays
        if self.day_restricted and self.weekday_restricted:
            return dom or dow
        if self.day_restricted:
            return dom
        if self.weekday_restricted:
            return dow
        return True

    def matches(self, ts: datetime) -> bool:
        ts = ts.astimezone(UTC)
        return (ts.second == 0 and ts.microsecond == 0 and ts.minute in self.minutes
                and ts.hour in self.hours and self.day_matches(ts.date()))

    def next_after(self, after: datetime) -> datetime:
        """Smallest matching minute strictly after ``after``."""
        after = after.astimezone(UTC)
        start = after.replace(second=0, microsecond=0) + timedelta(minutes=1)
        day = start.date()
        first = True
        for _ in range(_SEARCH_DAYS):
            if self.day_matches(day):
                floor = (start.hour, start.minute) if first else (0, 0)
                for h in self.hours:
                    if h < floor[0]:
                        continue
                    for m in self.minutes:
                        if (h, m) >= floor:
                            return datetime(day.year, day.month, day.day, h, m, tzinfo=UTC)
            day += timedelta(days=1)
            first = False
        raise CronSyntaxError(f"{self.expr!r} has no match within {_SEARCH_DAYS} days")  # pragma: no cover


def parse_cron(expr: str) -> CronSchedule:
    parts = expr.split()
    if len(parts) != 5:
        raise CronSyntaxError(f"expected 5 fields, got {len(parts)} in {expr!r}")
    fields = [_parse_field(p, name, lo, hi) for p, (name, lo, hi) in zip(parts, FIELDS)]
    minutes, hours, days, months, weekdays = fields
    weekdays = frozenset(d % 7 for d in weekdays)
    sched = CronSchedule(expr, tuple(sorted(minutes)), tuple(sorted(hours)), days, months, weekdays,
                         not parts[2].startswith("*"), not parts[4].startswith("*"))
    if sched.day_restricted and not sched.weekday_restricted:
        # Reject day-of-month/month combinations that can never occur (e.g. 31 in February).
        if not any(d <= calendar.monthrange(2000, m)[1] for m in months for d in days):
            raise CronSyntaxError(f"{expr!r} never matches: no listed day exists in the listed months")
    return sched


def cron_next(expr: str | CronSchedule, after: datetime) -> datetime:
    sched = parse_cron(expr) if isinstance(expr, str) else expr
    return sched.next_after(after)


def cron_matches(expr: str | CronSchedule, ts: datetime) -> bool:
    sched = parse_cron(expr) if isinstance(expr, str) else expr
    return sched.matches(ts)
