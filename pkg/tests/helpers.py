"""Shared test data: a hand-built GSOD fixture and synthetic station-year files."""

import calendar
import csv
from datetime import date, timedelta

import numpy as np

GSOD_HEADER = [
    "STATION", "DATE", "LATITUDE", "LONGITUDE", "ELEVATION", "NAME",
    "TEMP", "TEMP_ATTRIBUTES", "DEWP", "DEWP_ATTRIBUTES", "SLP", "SLP_ATTRIBUTES",
    "STP", "STP_ATTRIBUTES", "VISIB", "VISIB_ATTRIBUTES", "WDSP", "WDSP_ATTRIBUTES",
    "MXSPD", "GUST", "MAX", "MAX_ATTRIBUTES", "MIN", "MIN_ATTRIBUTES",
    "PRCP", "PRCP_ATTRIBUTES", "SNDP", "FRSHTT",
]


def gsod_row(**values):
    row = {k: "" for k in GSOD_HEADER}
    row.update(STATION="72503014732", NAME="LAGUARDIA AIRPORT, NY US", LATITUDE="40.7794",
               LONGITUDE="-73.88", TEMP_ATTRIBUTES="24", DEWP="20.1", MAX="40.1", MIN="25.0")
    row.update({k: str(v) for k, v in values.items()})
    return row


# five rows covering every transformation rule
FIXTURE_ROWS = [
    gsod_row(DATE="01/01/2019", ELEVATION="3.4", TEMP="32.5", SLP="1013.2", STP="999.9",
             VISIB="999.9", WDSP="8.1", MXSPD="15.0", GUST="999.9", PRCP="99.99",
             SNDP="999.9", FRSHTT="010000"),
    gsod_row(DATE="12/31/2019", ELEVATION="3.4", TEMP="41.0", SLP="9999.9", STP="1009.5",
             VISIB="10.0", WDSP="999.9", MXSPD="999.9", GUST="25.1", PRCP="0.12",
             SNDP="2.4", FRSHTT="100001"),
    gsod_row(DATE="02/29/2020", ELEVATION="3.4", TEMP="28.3", SLP="1020.0", STP="9999.9",
             VISIB="5.5", WDSP="12.3", MXSPD="20.0", GUST="", PRCP="", SNDP="",
             FRSHTT="001100"),
    gsod_row(DATE="07/04/2019", ELEVATION="9999.9", TEMP="80.6", SLP="1001.7", STP="998.0",
             VISIB="9.9", WDSP="5.0", MXSPD="9.9", GUST="999.9", PRCP="1.05", SNDP="999.9",
             FRSHTT="000010"),
    gsod_row(DATE="03/01/2019", ELEVATION="-999.9", TEMP="45.1", SLP="nan", STP="1015.3",
             VISIB="0.6", WDSP="0.0", MXSPD="3.1", GUST="999.9", PRCP="0.00", SNDP="999.9",
             FRSHTT="000000"),
]

# expected records, worked out by hand from the rules:
# sentinels and blanks -> 0.0, SLP/STP / 1000, ELEVATION / 1000,
# day_frac = (day_of_year - 1) / (days_in_year - 1)
FEATURE_ORDER = ("ELEVATION", "PRCP", "SLP", "STP", "VISIB", "WDSP", "MXSPD", "GUST", "SNDP",
                 "FOG", "RAIN", "SNOW", "HAIL", "THUNDER", "TORNADO")
FIXTURE_EXPECTED = [
    dict(day_frac=0.0, temp_f=32.5,
         features=[0.0034, 0.0, 1.0132, 0.9999, 0.0, 8.1, 15.0, 0.0, 0.0, 0, 1, 0, 0, 0, 0]),
    dict(day_frac=1.0, temp_f=41.0,
         features=[0.0034, 0.12, 0.0, 1.0095, 10.0, 0.0, 0.0, 25.1, 2.4, 1, 0, 0, 0, 0, 1]),
    dict(day_frac=59 / 365, temp_f=28.3,
         features=[0.0034, 0.0, 1.02, 0.0, 5.5, 12.3, 20.0, 0.0, 0.0, 0, 0, 1, 1, 0, 0]),
    dict(day_frac=184 / 364, temp_f=80.6,
         features=[0.0, 1.05, 1.0017, 0.998, 9.9, 5.0, 9.9, 0.0, 0.0, 0, 0, 0, 0, 1, 0]),
    dict(day_frac=59 / 364, temp_f=45.1,
         features=[0.0, 0.0, 0.0, 1.0153, 0.6, 0.0, 3.1, 0.0, 0.0, 0, 0, 0, 0, 0, 0]),
]


def write_gsod_csv(path, rows, quote_all=True):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GSOD_HEADER,
                           quoting=csv.QUOTE_ALL if quote_all else csv.QUOTE_MINIMAL)
        w.writeheader()
        w.writerows(rows)


def synthetic_station_year(rng, station, year=2019, n_days=None):
    """Rows for one station-year with a station-specific seasonal cycle.

    Stations differ in mean temperature, seasonal amplitude, phase,
    elevation and weather, so tasks drawn from different files are
    heterogeneous in the way real station-years are.
    """
    n_year = 366 if calendar.isleap(year) else 365
    n_days = n_days or int(rng.integers(60, n_year + 1))
    days = np.sort(rng.choice(n_year, size=min(n_days, n_year), replace=False))
    base = rng.uniform(20, 75)
    amp = rng.uniform(5, 30) * rng.choice([-1, 1])
    phase = rng.uniform(0.45, 0.6)
    elev = rng.uniform(0, 2500)
    slp0 = rng.uniform(1005, 1025)
    wind0 = rng.uniform(2, 15)
    rows = []
    for d in days:
        frac = d / (n_year - 1)
        season = np.cos(2 * np.pi * (frac - phase))
        wind = max(0.0, wind0 + rng.normal(0, 3))
        prcp = max(0.0, rng.normal(0.05, 0.3))
        rain = int(prcp > 0.2)
        temp = base - amp * season - 3.5 * elev / 1000 - 0.4 * (wind - wind0) - 4 * rain + rng.normal(0, 2)
        slp = slp0 + rng.normal(0, 6)
        rows.append(gsod_row(
            STATION=station, DATE=(date(year, 1, 1) + timedelta(days=int(d))).strftime("%m/%d/%Y"),
            ELEVATION=f"{elev:.1f}", TEMP=f"{temp:.1f}",
            SLP="9999.9" if rng.random() < 0.1 else f"{slp:.1f}",
            STP=f"{slp - elev / 8.3:.1f}", VISIB="999.9" if rng.random() < 0.05 else f"{rng.uniform(2, 10):.1f}",
            WDSP=f"{wind:.1f}", MXSPD=f"{wind * 1.6:.1f}", GUST="999.9" if rng.random() < 0.6 else f"{wind * 2.2:.1f}",
            PRCP=f"{prcp:.2f}", SNDP="999.9",
            FRSHTT=f"{int(rng.random() < 0.1)}{rain}{int(temp < 30 and rain)}00{0}",
        ))
    return rows


def write_synthetic_gsod_dir(directory, n_files, seed=0, min_days=60):
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_files):
        station = f"99{i:09d}"
        rows = synthetic_station_year(rng, station, n_days=int(rng.integers(min_days, 366)))
        path = directory / f"{station}.csv"
        write_gsod_csv(path, rows)
        paths.append(path)
    return paths


def write_digits_idx(path, n_images=500):
    """IDX image file built from scikit-learn's 8x8 digits, upscaled to 28x28.

    Stands in for MNIST, which cannot be downloaded here.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    from stmaml.idx import write_idx

    digits = load_digits().images[:n_images] / 16.0
    big = np.stack([np.clip(zoom(im, 3.5, order=1), 0, 1) for im in digits])
    write_idx(np.round(big * 255).astype(np.uint8), path)
    return path


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
