"""Weekly surveillance data pipeline: CSV ingestion, channel alignment,
chronological splitting, min-max scaling, and window extraction.

Input schemas (bit-exact rules; golden fixtures live in tests/fixtures/):

CDC FluView export
    Leading title lines are skipped by rule: a line is the header iff,
    after uppercasing and removing spaces, it contains YEAR, WEEK and
    %UNWEIGHTEDILI cells.  Rows carry one week each; duplicate weeks, week
    gaps, and non-numeric values (including the portal's "X" placeholder)
    are rejected with the offending line number.  If a REGION column is
    present and a state is requested, rows are filtered to it; multiple
    regions without a requested state is an error.

Google Trends "multiTimeline" export
    Leading metadata lines are skipped by rule: the header is the first
    line whose first cell is "Week" (a "Month" or "Day" header means the
    export is not weekly and is rejected).  Rows are (week start date,
    score); scores are integers in [0, 100], with "<1" read as 0.  Week
    starts must be 7 days apart.

Week alignment
    CDC YEAR/WEEK values are used verbatim as (iso_year, iso_week) labels.
    A Trends week-start date is assigned the ISO week of the first Monday
    on or after it, so Sunday-start exports land on the ISO week covering
    the majority of their days and Monday-start exports map to themselves.
    Other start weekdays are rejected rather than guessed at.

Scaling
    Min-max parameters are fit on the training region only (values from the
    test region may map outside [0, 1]; that is expected and preserved).
"""

import csv
import datetime
from dataclasses import dataclass

import numpy as np

from fluseq.errors import (
    BadValueError,
    DataError,
    DegenerateScaleError,
    DomainError,
    DuplicateWeekError,
    EmptySeriesError,
    JoinError,
    MissingColumnError,
    ParseError,
    RangeError,
    WeekGapError,
)

CHANNELS = ("ili_percent", "trends_score")  # channel 0 is the forecast target


def week_start(year, week):
    """Monday of an ISO week; raises for impossible labels."""
    try:
        return datetime.date.fromisocalendar(year, week, 1)
    except ValueError as exc:
        raise DomainError(f"invalid ISO week {year}-W{week:02d}: {exc}") from exc


def next_week(year, week):
    after = week_start(year, week) + datetime.timedelta(days=7)
    iso = after.isocalendar()
    return iso[0], iso[1]


def week_label(year, week):
    return f"{year}-W{week:02d}"


def weeks_between(a, b):
    """Whole weeks from label a to label b (negative if b precedes a)."""
    return (week_start(*b) - week_start(*a)).days // 7


@dataclass
class TimeSeries:
    """One channel of dated weekly observations for one state."""

    state: str
    channel: str
    points: list  # ordered (iso_year, iso_week, value)

    def weeks(self):
        return [(y, w) for y, w, _ in self.points]

    def values(self):
        return np.array([v for _, _, v in self.points])

    def validate_contiguous(self):
        for prev, cur in zip(self.points, self.points[1:]):
            expected = next_week(prev[0], prev[1])
            if (cur[0], cur[1]) != expected:
                raise WeekGapError(
                    f"gap after {week_label(prev[0], prev[1])}: expected "
                    f"{week_label(*expected)}, found {week_label(cur[0], cur[1])}"
                )
        return self


@dataclass
class FeatureSeries:
    """Aligned two-channel weekly features: values[:, 0] is ILI percent,
    values[:, 1] the trends score."""

    state: str
    weeks: list
    values: np.ndarray

    def __len__(self):
        return len(self.weeks)


def _normalize_header(cell):
    return cell.strip().upper().replace(" ", "")


def _read_rows(path):
    with open(path, newline="", encoding="utf-8-sig") as fh:
        return list(csv.reader(fh))


def load_ili_csv(path, state=None, allow_gaps=False):
    """Parse a FluView-style export into a TimeSeries (see module docs).

    allow_gaps skips the contiguity check so :func:`impute_linear` can fill
    single-week holes afterwards; gaps are otherwise a hard error.
    """
    rows = _read_rows(path)
    header_idx = None
    cols = {}
    for idx, cells in enumerate(rows):
        normalized = [_normalize_header(c) for c in cells]
        if "YEAR" in normalized and "WEEK" in normalized:
            if "%UNWEIGHTEDILI" not in normalized:
                raise MissingColumnError(
                    "header found but %UNWEIGHTED ILI column is missing", line=idx + 1
                )
            cols = {name: normalized.index(name) for name in ("YEAR", "WEEK", "%UNWEIGHTEDILI")}
            if "REGION" in normalized:
                cols["REGION"] = normalized.index("REGION")
            header_idx = idx
            break
    if header_idx is None:
        raise MissingColumnError(
            "no header line with YEAR, WEEK and %UNWEIGHTED ILI columns found"
        )

    points = []
    seen = {}
    regions = set()
    for idx in range(header_idx + 1, len(rows)):
        cells = rows[idx]
        if not cells or all(not c.strip() for c in cells):
            continue
        line = idx + 1
        region = ""
        if "REGION" in cols:
            region = cells[cols["REGION"]].strip()
            regions.add(region)
            if state is not None and region.lower() != state.lower():
                continue
        try:
            year = int(cells[cols["YEAR"]])
            week = int(cells[cols["WEEK"]])
        except (ValueError, IndexError) as exc:
            raise BadValueError(f"unreadable YEAR/WEEK: {exc}", line=line) from exc
        raw = cells[cols["%UNWEIGHTEDILI"]].strip()
        try:
            value = float(raw)
        except ValueError as exc:
            raise BadValueError(
                f"non-numeric %UNWEIGHTED ILI value {raw!r}", line=line
            ) from exc
        if value < 0:
            raise RangeError(f"negative ILI percentage {value}", line=line)
        if (region, year, week) in seen:
            raise DuplicateWeekError(
                f"duplicate week {week_label(year, week)} (first at line "
                f"{seen[(region, year, week)]})",
                line=line,
            )
        seen[(region, year, week)] = line
        points.append((year, week, value))
    if state is None and len(regions) > 1:
        raise ParseError(
            f"file holds {len(regions)} regions; pass a state to select one"
        )
    if not points:
        raise EmptySeriesError(f"no data rows in {path}")
    points.sort(key=lambda p: week_start(p[0], p[1]))
    series = TimeSeries(
        state=state or (regions.pop() if regions else ""),
        channel="ili_percent",
        points=points,
    )
    return series if allow_gaps else series.validate_contiguous()


def load_trends_csv(path, state=None, allow_gaps=False):
    """Parse a Google Trends multiTimeline export (see module docs)."""
    rows = _read_rows(path)
    header_idx = None
    for idx, cells in enumerate(rows):
        if not cells:
            continue
        first = cells[0].strip().lower()
        if first == "week":
            header_idx = idx
            break
        if first in ("month", "day"):
            raise ParseError(
                f"{cells[0].strip()!r} granularity export; weekly data required",
                line=idx + 1,
            )
    if header_idx is None:
        raise MissingColumnError("no 'Week' header line found")

    points = []
    seen = {}
    prev_date = None
    for idx in range(header_idx + 1, len(rows)):
        cells = rows[idx]
        if not cells or all(not c.strip() for c in cells):
            continue
        line = idx + 1
        if len(cells) < 2:
            raise BadValueError("expected 'date,score' row", line=line)
        try:
            start = datetime.date.fromisoformat(cells[0].strip())
        except ValueError as exc:
            raise BadValueError(f"unreadable week date {cells[0]!r}", line=line) from exc
        raw = cells[1].strip()
        if raw == "<1":
            value = 0.0
        else:
            try:
                value = float(raw)
            except ValueError as exc:
                raise BadValueError(f"non-numeric score {raw!r}", line=line) from exc
        if not 0.0 <= value <= 100.0:
            raise RangeError(f"trends score {value} outside [0, 100]", line=line)
        if start.isoweekday() not in (7, 1):
            # Sunday- and Monday-start exports are understood; anything else
            # would make the ISO-week assignment a guess.
            raise ParseError(
                f"week start {start} is a {start.strftime('%A')}; expected "
                "Sunday or Monday",
                line=line,
            )
        if (
            not allow_gaps
            and prev_date is not None
            and (start - prev_date).days != 7
        ):
            raise WeekGapError(
                f"week start {start} is {(start - prev_date).days} days after "
                f"the previous row",
                line=line,
            )
        prev_date = start
        monday = start + datetime.timedelta(days=(8 - start.isoweekday()) % 7)
        iso = monday.isocalendar()
        if (iso[0], iso[1]) in seen:
            raise DuplicateWeekError(
                f"duplicate week {week_label(iso[0], iso[1])}", line=line
            )
        seen[(iso[0], iso[1])] = line
        points.append((iso[0], iso[1], value))
    if not points:
        raise EmptySeriesError(f"no data rows in {path}")
    series = TimeSeries(state=state or "", channel="trends_score", points=points)
    return series if allow_gaps else series.validate_contiguous()


def impute_linear(series):
    """Fill single-week gaps by linear interpolation; longer gaps still
    raise.  Returns a new TimeSeries."""
    points = []
    for prev, cur in zip(series.points, series.points[1:] + [None]):
        points.append(prev)
        if cur is None:
            break
        missing = weeks_between((prev[0], prev[1]), (cur[0], cur[1])) - 1
        if missing == 1:
            year, week = next_week(prev[0], prev[1])
            points.append((year, week, (prev[2] + cur[2]) / 2.0))
        elif missing > 1:
            raise WeekGapError(
                f"{missing}-week gap after {week_label(prev[0], prev[1])} is too "
                "wide for single-week imputation"
            )
    out = TimeSeries(state=series.state, channel=series.channel, points=points)
    return out.validate_contiguous()


def join_features(ili, trends):
    """Inner-join the two channels on ISO week; the intersection must be
    non-empty and contiguous."""
    if ili.state and trends.state and ili.state.lower() != trends.state.lower():
        raise JoinError(f"state mismatch: {ili.state!r} vs {trends.state!r}")
    trends_map = {(y, w): v for y, w, v in trends.points}
    weeks = []
    values = []
    for year, week, ili_value in ili.points:
        if (year, week) in trends_map:
            weeks.append((year, week))
            values.append((ili_value, trends_map[(year, week)]))
    if not weeks:
        raise JoinError("the two channels share no weeks")
    for prev, cur in zip(weeks, weeks[1:]):
        if cur != next_week(*prev):
            raise JoinError(
                f"joined range has a gap after {week_label(*prev)}"
            )
    return FeatureSeries(
        state=ili.state or trends.state,
        weeks=weeks,
        values=np.array(values, dtype=float),
    )


def chronological_split(series, ratio=0.67, in_len=10, out_len=4):
    """Split a FeatureSeries at floor(ratio * length); no shuffling.

    Both regions must be long enough to hold at least one window.
    """
    if not 0.0 < ratio < 1.0:
        raise DomainError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(series)
    cut = int(ratio * n)
    span = in_len + out_len
    if cut < span or n - cut < span:
        raise DataError(
            f"split {cut}/{n - cut} cannot fit a {in_len}+{out_len} window on "
            "both sides"
        )
    def piece(weeks, values):
        return FeatureSeries(state=series.state, weeks=weeks, values=values.copy())

    return (
        piece(series.weeks[:cut], series.values[:cut]),
        piece(series.weeks[cut:], series.values[cut:]),
    )


@dataclass
class ScalerParams:
    """Per-channel min-max parameters, fit on the training region only."""

    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, values):
        values = np.asarray(values, dtype=float)
        mins = values.min(axis=0)
        maxs = values.max(axis=0)
        for channel, (lo, hi) in enumerate(zip(mins, maxs)):
            if hi <= lo:
                raise DegenerateScaleError(
                    f"channel {CHANNELS[channel] if channel < len(CHANNELS) else channel} "
                    f"is constant ({lo}) over the fit region"
                )
        return cls(mins=mins, maxs=maxs)

    def transform(self, values):
        return (np.asarray(values, dtype=float) - self.mins) / (self.maxs - self.mins)

    def inverse(self, scaled):
        return np.asarray(scaled, dtype=float) * (self.maxs - self.mins) + self.mins

    def transform_target(self, values):
        return (np.asarray(values, dtype=float) - self.mins[0]) / (
            self.maxs[0] - self.mins[0]
        )

    def inverse_target(self, scaled):
        return np.asarray(scaled, dtype=float) * (self.maxs[0] - self.mins[0]) + self.mins[0]

    def to_dict(self):
        return {"mins": list(self.mins), "maxs": list(self.maxs)}

    @classmethod
    def from_dict(cls, payload):
        return cls(
            mins=np.array(payload["mins"], dtype=float),
            maxs=np.array(payload["maxs"], dtype=float),
        )


@dataclass
class WindowSample:
    """One training/evaluation instance: a scaled (in_len, channels) input
    block and the following out_len scaled target-channel values."""

    input: np.ndarray
    target: np.ndarray
    origin_week: str  # label of the last input week


def make_windows(series, in_len=10, out_len=4):
    """Stride-1 sliding windows over a (scaled) FeatureSeries."""
    n = len(series)
    span = in_len + out_len
    if n < span:
        raise DataError(f"region of {n} weeks cannot fit a {in_len}+{out_len} window")
    samples = []
    for start in range(n - span + 1):
        block = series.values[start : start + in_len]
        target = series.values[start + in_len : start + span, 0]
        samples.append(
            WindowSample(
                input=block.copy(),
                target=target.copy(),
                origin_week=week_label(*series.weeks[start + in_len - 1]),
            )
        )
    return samples


def prepare_dataset(ili, trends, ratio=0.67, in_len=10, out_len=4):
    """Join, split, fit the scaler on the training region, scale both
    regions, and window them.

    Returns (train_windows, test_windows, scaler, train_region, test_region)
    with the regions unscaled (baselines consume original units).
    """
    features = join_features(ili, trends)
    train_region, test_region = chronological_split(
        features, ratio=ratio, in_len=in_len, out_len=out_len
    )
    scaler = ScalerParams.fit(train_region.values)

    def windows(region):
        scaled = FeatureSeries(
            state=region.state,
            weeks=region.weeks,
            values=scaler.transform(region.values),
        )
        return make_windows(scaled, in_len=in_len, out_len=out_len)

    return windows(train_region), windows(test_region), scaler, train_region, test_region
