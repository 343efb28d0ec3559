"""Event-record study datasets: parsing, validation, serialization, summaries.

The on-disk format is a UTF-8 CSV with header
``ID,TIME,EVID,AMT,DV,MDV,WT,AGE,SEX,VOLGRP,AAG`` and ``.`` for missing
values.  TIME is minutes, AMT mg, DV mg/L; SEX is 0=male/1=female and
VOLGRP is 0=low_volume/1=high_volume.  Each subject is a single bolus
into the absorption depot followed by observation rows.

Quantification-limit censoring is applied at parse time: observation rows
with DV strictly below the LLOQ get an effective ``mdv=1``.  The flag read
from the file is kept separately (``mdv_input``) and is what gets written
back out, so the raw DV and the source flags survive a round trip.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DatasetError",
    "EventRecord",
    "Subject",
    "StudyDataset",
    "CovariateSummary",
    "parse_dataset",
    "load_dataset",
    "serialize_dataset",
    "write_dataset",
    "summarize_covariates",
]

CSV_COLUMNS = ("ID", "TIME", "EVID", "AMT", "DV", "MDV", "WT", "AGE", "SEX", "VOLGRP", "AAG")

DEFAULT_LLOQ = 0.05  # mg/L

SEX_MALE = 0
SEX_FEMALE = 1
VOLGRP_LOW = 0
VOLGRP_HIGH = 1


class DatasetError(ValueError):
    """Malformed dataset input; carries the offending 1-based file line when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class EventRecord:
    """One dose (evid=1) or observation (evid=0) row.

    ``mdv`` is the effective missing-DV flag after LLOQ censoring;
    ``mdv_input`` is the flag as read from the source file.
    """

    subject_id: int
    time: float
    evid: int
    amt: float | None
    dv: float | None
    mdv: int
    wt: float
    age: float
    sex: int
    volgrp: int
    aag: float | None
    mdv_input: int = 0

    @property
    def is_dose(self) -> bool:
        return self.evid == 1

    @property
    def is_observation(self) -> bool:
        return self.evid == 0

    @property
    def usable(self) -> bool:
        """Observation that contributes to the likelihood."""
        return self.evid == 0 and self.mdv == 0


@dataclass(frozen=True)
class Subject:
    """All records of one subject, sorted by (time, dose-before-observation)."""

    subject_id: int
    records: tuple[EventRecord, ...]

    def __post_init__(self):
        if not any(r.is_dose for r in self.records):
            raise DatasetError(f"subject {self.subject_id} has no dose record")

    @property
    def doses(self) -> tuple[EventRecord, ...]:
        return tuple(r for r in self.records if r.is_dose)

    @property
    def observations(self) -> tuple[EventRecord, ...]:
        return tuple(r for r in self.records if r.is_observation)

    @property
    def dose_amount(self) -> float:
        return sum(r.amt for r in self.doses)

    @property
    def wt(self) -> float:
        return self.records[0].wt

    @property
    def age(self) -> float:
        return self.records[0].age

    @property
    def sex(self) -> int:
        return self.records[0].sex

    @property
    def volgrp(self) -> int:
        return self.records[0].volgrp

    @property
    def aag(self) -> float | None:
        return self.records[0].aag

    def covariate(self, name: str):
        """Per-subject covariate value by lower-case name (may be None for aag)."""
        return getattr(self, name)


@dataclass(frozen=True)
class StudyDataset:
    subjects: tuple[Subject, ...]
    lloq: float = DEFAULT_LLOQ

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_observations(self) -> int:
        return sum(len(s.observations) for s in self.subjects)

    @property
    def n_usable_observations(self) -> int:
        return sum(sum(r.usable for r in s.observations) for s in self.subjects)

    def subject(self, subject_id: int) -> Subject:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(f"no subject {subject_id}")


@dataclass(frozen=True)
class NumericSummary:
    n: int
    mean: float
    median: float
    q1: float
    q3: float


@dataclass(frozen=True)
class CategorySummary:
    counts: dict[int, int]
    percents: dict[int, float]


@dataclass(frozen=True)
class CovariateSummary:
    numeric: dict[str, NumericSummary]
    categorical: dict[str, CategorySummary]


def _parse_number(token: str, column: str, line: int) -> float | None:
    token = token.strip()
    if token == "" or token == ".":
        return None
    try:
        value = float(token)
    except ValueError:
        raise DatasetError(f"non-numeric {column} value {token!r}", line) from None
    if not math.isfinite(value):
        raise DatasetError(f"non-finite {column} value {token!r}", line)
    return value


def _require(value, column: str, line: int):
    if value is None:
        raise DatasetError(f"missing required {column} value", line)
    return value


def parse_dataset(text: str, lloq: float = DEFAULT_LLOQ) -> StudyDataset:
    """Parse CSV text into a validated, grouped, time-sorted StudyDataset.

    Observation rows with dv strictly below ``lloq`` are flagged mdv=1
    (the raw dv is retained).  Row order in the input is irrelevant.
    """
    lines = io.StringIO(text).read().splitlines()
    if not lines:
        raise DatasetError("empty input")
    header = [c.strip().upper() for c in lines[0].split(",")]
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise DatasetError(f"header lacks required column(s): {', '.join(missing)}", 1)
    unknown = [c for c in header if c not in CSV_COLUMNS]
    if unknown:
        raise DatasetError(f"unknown column(s): {', '.join(unknown)}", 1)
    col = {name: header.index(name) for name in CSV_COLUMNS}

    records: list[EventRecord] = []
    seen: dict[tuple[int, float, int], int] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split(",")
        if len(fields) != len(header):
            raise DatasetError(f"expected {len(header)} fields, got {len(fields)}", lineno)

        def num(name):
            return _parse_number(fields[col[name]], name, lineno)

        subject_id = int(_require(num("ID"), "ID", lineno))
        time = _require(num("TIME"), "TIME", lineno)
        evid = int(_require(num("EVID"), "EVID", lineno))
        if evid not in (0, 1):
            raise DatasetError(f"EVID must be 0 or 1, got {evid}", lineno)
        if time < 0:
            raise DatasetError(f"negative TIME {time}", lineno)
        amt = num("AMT")
        dv = num("DV")
        mdv_raw = num("MDV")
        wt = _require(num("WT"), "WT", lineno)
        if wt <= 0:
            raise DatasetError(f"nonpositive WT {wt}", lineno)
        age = _require(num("AGE"), "AGE", lineno)
        sex = int(_require(num("SEX"), "SEX", lineno))
        volgrp = int(_require(num("VOLGRP"), "VOLGRP", lineno))
        if sex not in (SEX_MALE, SEX_FEMALE):
            raise DatasetError(f"SEX must be 0 or 1, got {sex}", lineno)
        if volgrp not in (VOLGRP_LOW, VOLGRP_HIGH):
            raise DatasetError(f"VOLGRP must be 0 or 1, got {volgrp}", lineno)
        aag = num("AAG")

        if evid == 1:
            if dv is not None:
                raise DatasetError("dose row (EVID=1) carries a DV value", lineno)
            if amt is None or amt <= 0:
                raise DatasetError("dose row (EVID=1) requires AMT > 0", lineno)
            mdv_input = 1
            mdv = 1
        else:
            if amt is not None:
                raise DatasetError("observation row (EVID=0) carries an AMT value", lineno)
            mdv_input = int(mdv_raw) if mdv_raw is not None else 0
            if mdv_input not in (0, 1):
                raise DatasetError(f"MDV must be 0 or 1, got {mdv_input}", lineno)
            if dv is None and mdv_input == 0:
                raise DatasetError("observation row with MDV=0 requires a DV value", lineno)
            mdv = 1 if (mdv_input == 1 or (dv is not None and dv < lloq)) else 0

        key = (subject_id, time, evid)
        if key in seen:
            raise DatasetError(
                f"duplicate (ID, TIME, EVID) = {key}, first seen at line {seen[key]}", lineno
            )
        seen[key] = lineno
        records.append(
            EventRecord(
                subject_id=subject_id,
                time=time,
                evid=evid,
                amt=amt,
                dv=dv,
                mdv=mdv,
                wt=wt,
                age=age,
                sex=sex,
                volgrp=volgrp,
                aag=aag,
                mdv_input=mdv_input,
            )
        )

    if not records:
        raise DatasetError("no data rows")

    by_id: dict[int, list[EventRecord]] = {}
    for rec in records:
        by_id.setdefault(rec.subject_id, []).append(rec)

    subjects = []
    for subject_id in sorted(by_id):
        group = sorted(by_id[subject_id], key=lambda r: (r.time, -r.evid))
        for attr in ("wt", "age", "sex", "volgrp", "aag"):
            values = {getattr(r, attr) for r in group}
            if len(values) > 1:
                raise DatasetError(
                    f"subject {subject_id} has inconsistent {attr.upper()} values {sorted(values, key=str)}"
                )
        subjects.append(Subject(subject_id=subject_id, records=tuple(group)))

    return StudyDataset(subjects=tuple(subjects), lloq=lloq)


def load_dataset(path, lloq: float = DEFAULT_LLOQ) -> StudyDataset:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dataset(fh.read(), lloq=lloq)


def _fmt(value) -> str:
    if value is None:
        return "."
    if isinstance(value, float):
        if value == int(value) and abs(value) < 1e15:
            return str(int(value))
        return repr(value)
    return str(value)


def serialize_dataset(ds: StudyDataset) -> str:
    """Canonical CSV text; ``parse_dataset(serialize_dataset(ds), ds.lloq)`` equals ``ds``.

    The MDV column holds the source flag (``mdv_input``), not the
    LLOQ-derived effective flag, so censoring stays reproducible from the
    raw values.
    """
    out = [",".join(CSV_COLUMNS)]
    for subject in ds.subjects:
        for r in subject.records:
            out.append(
                ",".join(
                    (
                        _fmt(r.subject_id),
                        _fmt(r.time),
                        _fmt(r.evid),
                        _fmt(r.amt),
                        _fmt(r.dv),
                        _fmt(r.mdv_input if r.evid == 0 else None),
                        _fmt(r.wt),
                        _fmt(r.age),
                        _fmt(r.sex),
                        _fmt(r.volgrp),
                        _fmt(r.aag),
                    )
                )
            )
    return "\n".join(out) + "\n"


def write_dataset(ds: StudyDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_dataset(ds))


def summarize_covariates(ds: StudyDataset) -> CovariateSummary:
    """Per-subject covariate summaries: mean/median/quartiles and category counts.

    Quartiles use linear interpolation between closest order statistics
    (numpy's default rule).  Subjects missing an optional covariate are
    excluded from that covariate's summary only.
    """
    numeric = {}
    for name in ("wt", "age", "aag"):
        values = np.array(
            [s.covariate(name) for s in ds.subjects if s.covariate(name) is not None],
            dtype=float,
        )
        if values.size == 0:
            numeric[name] = NumericSummary(n=0, mean=float("nan"), median=float("nan"),
                                           q1=float("nan"), q3=float("nan"))
            continue
        q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
        numeric[name] = NumericSummary(
            n=int(values.size),
            mean=float(values.mean()),
            median=float(med),
            q1=float(q1),
            q3=float(q3),
        )

    categorical = {}
    for name in ("sex", "volgrp"):
        values = [s.covariate(name) for s in ds.subjects]
        counts = {level: values.count(level) for level in sorted(set(values))}
        total = sum(counts.values())
        percents = {level: 100.0 * n / total for level, n in counts.items()}
        categorical[name] = CategorySummary(counts=counts, percents=percents)

    return CovariateSummary(numeric=numeric, categorical=categorical)
