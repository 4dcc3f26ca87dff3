"""NOAA GSOD station-year files to few-shot temperature regression tasks.

Each CSV holds one year of daily summaries from one station. Per row we
keep the day of year (as a fraction), 15 weather features and the mean
temperature (the target). Station number, name and coordinates are
dropped so a task never reveals which station it came from.
"""

from __future__ import annotations

import calendar
import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from datetime import date
from decimal import Decimal
from pathlib import Path

import numpy as np

from .tasks import Task

# columns removed before anything else is read
DROPPED_COLUMNS = (
    "STATION",
    "NAME",
    "TEMP_ATTRIBUTES",
    "DEWP",
    "DEWP_ATTRIBUTES",
    "PRCP_ATTRIBUTES",
    "SLP_ATTRIBUTES",
    "STP_ATTRIBUTES",
    "VISIB_ATTRIBUTES",
    "WDSP_ATTRIBUTES",
    "MAX",
    "MIN",
    "MAX_ATTRIBUTES",
    "MIN_ATTRIBUTES",
    "LATITUDE",
    "LONGITUDE",
)

NUMERIC_FEATURES = ("ELEVATION", "PRCP", "SLP", "STP", "VISIB", "WDSP", "MXSPD", "GUST", "SNDP")
FRSHTT_FLAGS = ("FOG", "RAIN", "SNOW", "HAIL", "THUNDER", "TORNADO")
FEATURE_NAMES = NUMERIC_FEATURES + FRSHTT_FLAGS
REQUIRED_COLUMNS = ("DATE", "TEMP") + NUMERIC_FEATURES + ("FRSHTT",)

# GSOD's "missing" marker per column; the field width decides how many 9s
SENTINELS = {
    "TEMP": (9999.9,),
    "SLP": (9999.9,),
    "STP": (9999.9,),
    "VISIB": (999.9,),
    "WDSP": (999.9,),
    "MXSPD": (999.9,),
    "GUST": (999.9,),
    "SNDP": (999.9,),
    "PRCP": (99.99,),
    "ELEVATION": (9999.9, -999.9),
}

# unit conversions applied after sentinel removal
# unit conversions as powers of ten: millibar -> bar, metre -> kilometre.
# They shift the decimal point of the text field so the result is the
# double nearest the exact decimal value (1015.3 -> 1.0153).
DECIMAL_SHIFT = {"SLP": -3, "STP": -3, "ELEVATION": -3}

MIN_ROWS = 40


class GsodFormatError(ValueError):
    pass


@dataclass
class GsodRecord:
    day_frac: float
    features: np.ndarray  # FEATURE_NAMES order
    temp_f: float

    def inputs(self) -> np.ndarray:
        return np.concatenate([[self.day_frac], self.features])

    def to_dict(self) -> dict:
        return {
            "day_frac": self.day_frac,
            "features": dict(zip(FEATURE_NAMES, (float(v) for v in self.features))),
            "temp_f": self.temp_f,
        }


@dataclass
class StationYearFile:
    identifier: str
    rows: list[dict] = field(default_factory=list)

    @property
    def eligible(self) -> bool:
        return len(self.rows) >= MIN_ROWS

    def __len__(self):
        return len(self.rows)

    def records(self) -> list[GsodRecord]:
        return [transform_record(r, i) for i, r in enumerate(self.rows)]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """``(inputs [n x 16], temperatures [n x 1])``."""
        recs = self.records()
        if not recs:
            return np.zeros((0, 1 + len(FEATURE_NAMES))), np.zeros((0, 1))
        return (
            np.stack([r.inputs() for r in recs]),
            np.array([[r.temp_f] for r in recs]),
        )


def _to_float(text) -> float:
    if text is None:
        return math.nan
    text = str(text).strip()
    if not text:
        return math.nan
    try:
        return float(text)
    except ValueError:
        return math.nan


def _shift(value: float, exponent: int) -> float:
    if exponent == 0 or value == 0.0:
        return value
    return float(Decimal(repr(value)).scaleb(exponent))


def clean_value(column: str, value: float) -> float:
    """Replace NaN and the column's all-9s sentinel by 0.0."""
    if value is None or math.isnan(value) or value in SENTINELS.get(column, ()):
        return 0.0
    return float(value)


def valid_temperature(text) -> bool:
    v = _to_float(text)
    return not math.isnan(v) and v not in SENTINELS["TEMP"]


def parse_date(text: str) -> date:
    text = str(text).strip()
    try:
        if "/" in text:
            month, day, year = (int(p) for p in text.split("/"))
        else:
            year, month, day = (int(p) for p in text.split("-"))
        return date(year, month, day)
    except ValueError:
        raise GsodFormatError(f"malformed date {text!r}") from None


def day_fraction(d: date) -> float:
    """Jan 1 maps to 0.0 and Dec 31 to 1.0."""
    days = 366 if calendar.isleap(d.year) else 365
    return (d.timetuple().tm_yday - 1) / (days - 1)


def frshtt_bits(text) -> list[float]:
    s = "" if text is None else str(text).strip()
    if s.endswith(".0"):
        s = s[:-2]
    s = s.zfill(6)
    if len(s) != 6 or set(s) - {"0", "1"}:
        return [0.0] * 6
    return [float(c) for c in s]


def transform_record(row: dict, index: int = 0) -> GsodRecord:
    """Map one raw CSV row to a :class:`GsodRecord`."""
    try:
        d = parse_date(row["DATE"])
    except GsodFormatError as exc:
        raise GsodFormatError(f"row {index}: {exc}") from None
    feats = []
    for col in NUMERIC_FEATURES:
        v = clean_value(col, _to_float(row.get(col)))
        feats.append(_shift(v, DECIMAL_SHIFT.get(col, 0)))
    feats += frshtt_bits(row.get("FRSHTT"))
    temp = _to_float(row.get("TEMP"))
    return GsodRecord(day_fraction(d), np.array(feats, dtype=np.float64), clean_value("TEMP", temp))


def parse_gsod_csv(raw, identifier: str = "") -> StationYearFile:
    """Parse a GSOD CSV (bytes, text, path or binary/text stream).

    Only rows with a valid temperature are kept. Columns are looked up by
    header name, so their order does not matter.
    """
    if isinstance(raw, (str, os.PathLike)) and os.path.exists(raw):
        identifier = identifier or Path(raw).stem
        with open(raw, "rb") as fh:
            raw = fh.read()
    if hasattr(raw, "read"):
        raw = raw.read()
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8-sig", errors="replace")
    if not raw.strip():
        return StationYearFile(identifier, [])
    reader = csv.DictReader(io.StringIO(raw))
    header = [h.strip() for h in (reader.fieldnames or [])]
    reader.fieldnames = header
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise GsodFormatError(f"missing mandatory column(s): {', '.join(missing)}")
    rows = []
    for row in reader:
        if not identifier and row.get("STATION"):
            identifier = row["STATION"].strip()
        if not valid_temperature(row.get("TEMP")):
            continue
        rows.append({k: v for k, v in row.items() if k not in DROPPED_COLUMNS and k is not None})
    return StationYearFile(identifier, rows)


def records_to_jsonl(records) -> str:
    """Deterministic JSON-lines rendering of transformed records."""
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def sample_weather_task(
    file: StationYearFile, shots: int = 10, queries: int = 100, rng: np.random.Generator | None = None
) -> Task:
    """``shots`` training days and up to ``queries`` disjoint test days."""
    rng = rng if rng is not None else np.random.default_rng()
    n = len(file)
    if n < shots:
        raise ValueError(f"{file.identifier}: {n} rows cannot supply {shots} shots")
    queries = min(queries, n - shots)
    if queries < 1:
        raise ValueError(f"{file.identifier}: no rows left for the test split")
    x, y = file.arrays()
    order = rng.permutation(n)
    tr, te = order[:shots], order[shots : shots + queries]
    return Task(x[tr], y[tr], x[te], y[te], "squared_error", -1)


def load_gsod_dir(directory) -> list[StationYearFile]:
    """Every eligible station-year CSV under ``directory``, sorted by path."""
    files = []
    for path in sorted(Path(directory).rglob("*.csv")):
        f = parse_gsod_csv(str(path), identifier=str(path.relative_to(directory)))
        if f.eligible:
            files.append(f)
    return files


def split_counts(n: int, train: int = 42000, val: int = 5000, test: int = 1000) -> tuple[int, int, int]:
    """Requested split sizes, scaled down proportionally when fewer files exist."""
    want = train + val + test
    if n >= want:
        return train, val, test
    n_val = int(round(n * val / want))
    n_test = max(1, int(round(n * test / want))) if test and n > 1 else 0
    return n - n_val - n_test, n_val, n_test


def split_files(files, seed: int = 0, train=42000, val=5000, test=1000):
    order = np.random.default_rng(seed).permutation(len(files))
    n_tr, n_va, n_te = split_counts(len(files), train, val, test)
    pick = lambda idx: [files[i] for i in idx]
    return (
        pick(order[:n_tr]),
        pick(order[n_tr : n_tr + n_va]),
        pick(order[n_tr + n_va : n_tr + n_va + n_te]),
    )
