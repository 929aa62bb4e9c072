import numpy as np
import pytest

from fluseq import data as data_mod


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def weekly_labels(start_year, start_week, n):
    labels = []
    year, week = start_year, start_week
    for _ in range(n):
        labels.append((year, week))
        year, week = data_mod.next_week(year, week)
    return labels


def series_pair(ili_values, trends_values, state="california", start=(2010, 40)):
    """Wrap two value arrays as aligned TimeSeries starting at `start`."""
    n = len(ili_values)
    labels = weekly_labels(start[0], start[1], n)
    ili = data_mod.TimeSeries(
        state=state,
        channel="ili_percent",
        points=[(y, w, float(v)) for (y, w), v in zip(labels, ili_values)],
    )
    trends = data_mod.TimeSeries(
        state=state,
        channel="trends_score",
        points=[(y, w, float(v)) for (y, w), v in zip(labels, trends_values)],
    )
    return ili, trends


def sinusoid_pair(n=430, period=52, amplitude=3.0, offset=4.0, state="california"):
    t = np.arange(n)
    ili = offset + amplitude * np.sin(2 * np.pi * t / period)
    trends = 50.0 + 45.0 * np.sin(2 * np.pi * t / period)
    return series_pair(ili, trends, state=state)


def write_ili_csv(path, points, state="california", title_line=True):
    """Golden-format FluView-style file from (year, week, value) triples."""
    lines = []
    if title_line:
        lines.append("FluView Portal Download")
    lines.append("REGION TYPE,REGION,YEAR,WEEK,% WEIGHTED ILI,%UNWEIGHTED ILI")
    for year, week, value in points:
        lines.append(f"States,{state},{year},{week},X,{value}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_trends_csv(path, rows, keyword="influenza", state="California"):
    """Golden-format multiTimeline-style file from (iso_date, score) pairs."""
    lines = ["Category: All categories", ""]
    lines.append(f"Week,{keyword}: ({state})")
    for date, score in rows:
        lines.append(f"{date},{score}")
    path.write_text("\n".join(lines) + "\n")
    return path


def sunday_dates(start, n):
    """n consecutive week-start dates (7 days apart) from an ISO date string."""
    import datetime

    first = datetime.date.fromisoformat(start)
    return [(first + datetime.timedelta(days=7 * i)).isoformat() for i in range(n)]
