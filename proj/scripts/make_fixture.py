#!/usr/bin/env python3
"""Generate the bundled ECDC-format fixture snapshot (cutoff 2020-06-15).

Each group's cumulative series follows a four-parameter logistic curve on the
square-root scale, with ~1% multiplicative noise on the cumulative counts and
calendar origins chosen so the back-transformed inflection lands on the
per-group target date. Africa is emitted as four member countries whose daily
counts sum to the continent-level curve.
"""
import csv
import math
import sys
from datetime import date, timedelta

import numpy as np

CUTOFF = date(2020, 6, 15)
RNG = np.random.default_rng(42)

# geoId, name, iso3, population, continent, phi1, phi2, phi3, phi4, inflection date
GROUPS = [
    ("AU", "Australia", "AUS", 25203198, "Oceania", -1.16, 85.12, 13.14, 5.91, date(2020, 3, 28)),
    ("CN", "China", "CHN", 1433783686, "Asia", -11.62, 295.34, 12.65, 6.05, date(2020, 2, 9)),
    ("FR", "France", "FRA", 67012883, "Europe", -41.37, 388.79, 17.64, 10.80, date(2020, 4, 4)),
    ("DE", "Germany", "DEU", 83019213, "Europe", -99.75, 429.46, 13.39, 10.93, date(2020, 4, 2)),
    ("IT", "Italy", "ITA", 60359546, "Europe", -123.75, 492.90, 16.68, 14.29, date(2020, 3, 31)),
    ("RU", "Russia", "RUS", 144373535, "Europe", -39.47, 733.75, 34.47, 14.79, date(2020, 5, 13)),
    ("ES", "Spain", "ESP", 46937060, "Europe", -95.04, 492.34, 13.78, 10.18, date(2020, 3, 31)),
    ("UK", "United_Kingdom", "GBR", 66647112, "Europe", -132.79, 556.44, 21.37, 17.10, date(2020, 4, 21)),
    ("US", "United_States_of_America", "USA", 329064917, "America", -3413.23, 1535.40, -18.42, 30.79, date(2020, 4, 18)),
    ("AFR", "_continent_", "", 0, "Africa", -128.87, 1988.38, 133.52, 55.61, date(2020, 9, 13)),
    ("BR", "Brazil", "BRA", 211049527, "America", -11.72, 1608.27, 75.27, 24.31, date(2020, 6, 23)),
    ("IN", "India", "IND", 1366417754, "Asia", -83.42, 1584.47, 91.08, 36.73, date(2020, 7, 26)),
]

AFRICA_MEMBERS = [
    ("ZA", "South_Africa", "ZAF", 58558270, 0.35),
    ("EG", "Egypt", "EGY", 100388073, 0.30),
    ("NG", "Nigeria", "NGA", 200963599, 0.20),
    ("DZ", "Algeria", "DZA", 43053054, 0.15),
]


def fplm(phi1, phi2, phi3, phi4, t):
    return phi1 + (phi2 - phi1) / (1.0 + math.exp((phi3 - t) / phi4))


def sqrt_scale_inflection(phi1, phi2, phi3, phi4):
    """Root of the curvature quadratic of (f_+)^2: -3*d*s^2 + (2*d - 2*p1)*s + p1 = 0."""
    d = phi2 - phi1
    a, b, c = -3.0 * d, 2.0 * d - 2.0 * phi1, phi1
    disc = math.sqrt(b * b - 4.0 * a * c)
    roots = [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)]
    s0 = max(0.0, -phi1 / d)
    s = max(r for r in roots if s0 < r < 1.0)
    return phi3 + phi4 * math.log(s / (1.0 - s))


def daily_series(phi1, phi2, phi3, phi4, infl):
    t_star = sqrt_scale_inflection(phi1, phi2, phi3, phi4)
    origin = infl - timedelta(days=round(t_star))  # calendar date of t = 0
    t_last = (CUTOFF - origin).days

    # first day with at least a fraction of a case on the curve
    t = t_last
    while t > t_last - 400 and max(fplm(phi1, phi2, phi3, phi4, t - 1), 0.0) ** 2 >= 0.3:
        t -= 1
    t_first = t

    days, cases = [], []
    for lead in range(8, 0, -1):  # quiet leading days, zero cases
        days.append(origin + timedelta(days=t_first - lead))
        cases.append(0)
    prev = 0
    cum = 0
    for ti in range(t_first, t_last + 1):
        curve = max(fplm(phi1, phi2, phi3, phi4, ti), 0.0) ** 2
        noisy = int(round(curve * math.exp(RNG.normal(0.0, 0.01))))
        cum = max(cum, noisy)
        days.append(origin + timedelta(days=ti))
        cases.append(cum - prev)
        prev = cum
    return days, cases


def split_counts(total, weights):
    """Largest-remainder split so member counts sum exactly to the total."""
    raw = [total * w for w in weights]
    base = [int(x) for x in raw]
    short = total - sum(base)
    order = sorted(range(len(raw)), key=lambda i: raw[i] - base[i], reverse=True)
    for i in range(short):
        base[order[i % len(base)]] += 1
    return base


def main(out_path):
    rows = []  # (name, date, cases, deaths, geo, iso3, pop, continent)

    def emit(name, geo, iso3, pop, continent, days, cases):
        for d, c in zip(days, cases):
            rows.append((name, d, c, int(round(max(c, 0) * 0.03)), geo, iso3, pop, continent))

    for geo, name, iso3, pop, continent, p1, p2, p3, p4, infl in GROUPS:
        days, cases = daily_series(p1, p2, p3, p4, infl)
        if geo == "AFR":
            weights = [w for *_, w in AFRICA_MEMBERS]
            member_cases = [[] for _ in AFRICA_MEMBERS]
            for c in cases:
                for i, part in enumerate(split_counts(c, weights)):
                    member_cases[i].append(part)
            for (mgeo, mname, miso, mpop, _), mc in zip(AFRICA_MEMBERS, member_cases):
                emit(mname, mgeo, miso, mpop, "Africa", days, mc)
        else:
            emit(name, geo, iso3, pop, continent, days, cases)

    # A few raw-feed quirks: one negative correction, one missing feed day,
    # one malformed row.
    fixed = []
    dropped_one = False
    for r in rows:
        name, d, c, dth, geo, iso3, pop, cont = r
        if geo == "ES" and d == date(2020, 5, 20):
            fixed.append((name, d, -3, 0, geo, iso3, pop, cont))
            continue
        if geo == "NG" and d == date(2020, 5, 5) and not dropped_one:
            dropped_one = True
            continue  # missing feed day; ingestion carries forward
        fixed.append(r)
    rows = fixed

    rows.sort(key=lambda r: (r[0], r[1]), reverse=False)
    # ECDC ships country blocks in reverse-chronological order
    rows.sort(key=lambda r: (r[0],))
    by_country = {}
    for r in rows:
        by_country.setdefault(r[0], []).append(r)

    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dateRep", "day", "month", "year", "cases", "deaths",
                    "countriesAndTerritories", "geoId", "countryterritoryCode",
                    "popData2019", "continentExp"])
        for name in sorted(by_country):
            for (cname, d, c, dth, geo, iso3, pop, cont) in sorted(
                    by_country[name], key=lambda r: r[1], reverse=True):
                w.writerow([d.strftime("%d/%m/%Y"), d.day, d.month, d.year, c, dth,
                            cname, geo, iso3, pop, cont])
        # malformed row: empty cases field (must be rejected, not fatal)
        w.writerow(["01/04/2020", 1, 4, 2020, "", 0, "Narnia", "XX", "XXX", 1000, "Other"])
    print(f"wrote {out_path}: {sum(len(v) for v in by_country.values()) + 1} data rows")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/ecdc_fixture_2020-06-15.csv")
