"""Supervised dataset construction: sites, patches, target preprocessing, folds.

A patch is the k x k window of the DEM around the cell containing a site,
spanning row/column offsets ``-(k // 2) .. -(k // 2) + k - 1`` (for k = 32,
-16..15). It is normalised by subtracting the site cell's elevation and
dividing by the SD of the whole DEM, so the centre value is exactly 0.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .raster import Grid, grid_stats
from .rng import substream

logger = logging.getLogger(__name__)

SITE_FIELDS = ("easting", "northing", "value", "below_lod", "lod")
DATASET_FORMAT_VERSION = 1
TRANSFORMS = ("identity", "log")
EXCLUSION_REASONS = ("na_target", "non_positive_log", "off_grid", "nodata_window")


class DatasetError(ValueError):
    pass


class TargetTransformError(DatasetError):
    def __init__(self, site_id, value):
        self.site_id = site_id
        self.value = value
        super().__init__(f"site {site_id}: value {value!r} is not positive and cannot be log transformed")


class PatchRejected(DatasetError):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class Site:
    """One sample location. ``raw_value`` is NaN when the measurement is NA."""

    easting: float
    northing: float
    raw_value: float
    below_detection: bool = False
    lower_detection_limit: float | None = None
    site_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.easting) and math.isfinite(self.northing)):
            raise DatasetError(f"site {self.site_id}: coordinates must be finite")
        if self.below_detection and not (self.lower_detection_limit and self.lower_detection_limit > 0):
            raise DatasetError(f"site {self.site_id}: below detection limit but no positive limit given")


def _parse_flag(token: str, where: str) -> bool:
    t = token.strip().lower()
    if t in ("", "0", "false", "no", "n"):
        return False
    if t in ("1", "true", "yes", "y"):
        return True
    raise DatasetError(f"{where}: cannot read below_lod flag {token!r}")


def _parse_optional(token: str, where: str, what: str) -> float | None:
    t = token.strip()
    if t == "" or t.upper() in ("NA", "NAN"):
        return None
    try:
        return float(t)
    except ValueError:
        raise DatasetError(f"{where}: non-numeric {what} {token!r}") from None


def read_sites_csv(path: str | Path) -> list[Site]:
    """Read ``easting,northing,value,below_lod,lod`` rows.

    Empty or ``NA`` values become NaN (excluded later, and counted). Site ids
    are the 1-based data row numbers.
    """
    sites = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != SITE_FIELDS:
            raise DatasetError(f"{path}: header must be {','.join(SITE_FIELDS)}, got {header}")
        for i, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}:{i + 1}"
            if len(row) != len(SITE_FIELDS):
                raise DatasetError(f"{where}: expected {len(SITE_FIELDS)} fields, got {len(row)}")
            e = _parse_optional(row[0], where, "easting")
            n = _parse_optional(row[1], where, "northing")
            if e is None or n is None:
                raise DatasetError(f"{where}: missing coordinates")
            value = _parse_optional(row[2], where, "value")
            sites.append(
                Site(
                    easting=e,
                    northing=n,
                    raw_value=math.nan if value is None else value,
                    below_detection=_parse_flag(row[3], where),
                    lower_detection_limit=_parse_optional(row[4], where, "lod"),
                    site_id=str(i),
                )
            )
    return sites


def write_sites_csv(sites: Iterable[Site], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SITE_FIELDS)
        for s in sites:
            w.writerow(
                [
                    repr(s.easting),
                    repr(s.northing),
                    "NA" if math.isnan(s.raw_value) else repr(s.raw_value),
                    int(s.below_detection),
                    "" if s.lower_detection_limit is None else repr(s.lower_detection_limit),
                ]
            )


def apply_detection_limit(site: Site) -> float:
    """Raw value, or half the detection limit for a below-limit record."""
    if site.below_detection:
        return site.lower_detection_limit / 2
    return site.raw_value


def transform_target(value: float, transform: str = "identity", site_id=None) -> float:
    if transform == "identity":
        return float(value)
    if transform == "log":
        if not value > 0:
            raise TargetTransformError(site_id, value)
        return math.log(value)
    raise DatasetError(f"unknown target transform {transform!r}; choose from {TRANSFORMS}")


def window_bounds(row: int, col: int, k: int) -> tuple[int, int, int, int]:
    r0 = row - k // 2
    c0 = col - k // 2
    return r0, r0 + k, c0, c0 + k


def extract_patch(grid: Grid, easting: float, northing: float, k: int = 32) -> np.ndarray:
    """Raw k x k elevations around the cell containing (easting, northing).

    Raises:
        PatchRejected: with reason ``off_grid`` if the window leaves the grid,
            or ``nodata_window`` if it contains NODATA.
    """
    row, col = grid.cell_index(easting, northing)
    return extract_patch_at(grid, int(row), int(col), k)


def extract_patch_at(grid: Grid, row: int, col: int, k: int) -> np.ndarray:
    r0, r1, c0, c1 = window_bounds(row, col, k)
    if r0 < 0 or c0 < 0 or r1 > grid.n_rows or c1 > grid.n_cols:
        raise PatchRejected("off_grid", f"window rows {r0}..{r1 - 1}, cols {c0}..{c1 - 1}")
    window = grid.cells[r0:r1, c0:c1]
    if np.any(window == grid.nodata_value):
        raise PatchRejected("nodata_window", f"window around cell ({row}, {col}) contains NODATA")
    return window.copy()


def normalize_patch(raw: np.ndarray, national_sd: float) -> np.ndarray:
    """(raw - raw[centre]) / national_sd with centre (k // 2, k // 2)."""
    if not national_sd > 0:
        raise DatasetError(f"national SD must be positive, got {national_sd}")
    raw = np.asarray(raw, dtype=np.float64)
    k = raw.shape[0]
    return (raw - raw[k // 2, k // 2]) / national_sd


@dataclass
class Patch:
    values: np.ndarray
    center_easting: float
    center_northing: float

    @property
    def k(self) -> int:
        return self.values.shape[0]


def make_patch(grid: Grid, easting: float, northing: float, k: int, national_sd: float) -> Patch:
    return Patch(normalize_patch(extract_patch(grid, easting, northing, k), national_sd), easting, northing)


def split_folds(n: int, k_folds: int, seed: int) -> np.ndarray:
    """Random fold labels from a seeded permutation; fold sizes differ by at most 1."""
    if k_folds < 2:
        raise DatasetError(f"need at least 2 folds, got {k_folds}")
    if n < k_folds:
        raise DatasetError(f"cannot split {n} records into {k_folds} folds")
    perm = substream(seed, "folds").permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.arange(n) % k_folds
    return labels


@dataclass
class ExclusionReport:
    total: int = 0
    accepted: int = 0
    counts: Counter = field(default_factory=Counter)
    excluded_ids: dict[str, list[str]] = field(default_factory=dict)

    def add(self, reason: str, site_id: str):
        self.counts[reason] += 1
        self.excluded_ids.setdefault(reason, []).append(site_id)

    @property
    def excluded(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "accepted": self.accepted,
            "excluded": {r: self.counts.get(r, 0) for r in EXCLUSION_REASONS},
            "excluded_site_ids": {r: ids for r, ids in self.excluded_ids.items()},
        }


@dataclass
class Dataset:
    """Normalised patches (N, k, k), transformed targets and fold labels."""

    patches: np.ndarray
    targets: np.ndarray
    sites: list[Site]
    target_transform: str
    fold_labels: np.ndarray
    k_folds: int
    national_sd: float

    def __post_init__(self):
        n = len(self.targets)
        if not (len(self.patches) == n == len(self.sites) == len(self.fold_labels)):
            raise DatasetError("patches, targets, sites and fold labels must have equal length")
        if not np.all(np.isfinite(self.targets)):
            raise DatasetError("targets must be finite")
        if n and (self.fold_labels.min() < 0 or self.fold_labels.max() >= self.k_folds):
            raise DatasetError(f"fold labels must lie in [0, {self.k_folds})")

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def k(self) -> int:
        return self.patches.shape[1]

    @property
    def coords(self) -> np.ndarray:
        return np.array([(s.easting, s.northing) for s in self.sites]).reshape(-1, 2)

    def fold_indices(self, folds: int | Sequence[int]) -> np.ndarray:
        folds = [folds] if isinstance(folds, (int, np.integer)) else list(folds)
        return np.flatnonzero(np.isin(self.fold_labels, folds))

    def save(self, directory: str | Path) -> Path:
        """Write manifest.json, patches.bin (little-endian float64), targets.csv, folds.csv."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": DATASET_FORMAT_VERSION,
            "n": len(self),
            "k": self.k,
            "target_transform": self.target_transform,
            "k_folds": self.k_folds,
            "national_sd": self.national_sd,
            "patches": "patches.bin",
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (d / "patches.bin").write_bytes(np.ascontiguousarray(self.patches, dtype="<f8").tobytes())
        with open(d / "targets.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site_id", "easting", "northing", "target"])
            for s, t in zip(self.sites, self.targets.tolist()):
                w.writerow([s.site_id, repr(s.easting), repr(s.northing), repr(t)])
        with open(d / "folds.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site_id", "fold"])
            for s, f in zip(self.sites, self.fold_labels.tolist()):
                w.writerow([s.site_id, f])
        return d

    @classmethod
    def load(cls, directory: str | Path) -> Dataset:
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("format_version") != DATASET_FORMAT_VERSION:
            raise DatasetError(f"{d}: unsupported dataset format {manifest.get('format_version')}")
        n, k = manifest["n"], manifest["k"]
        patches = np.frombuffer((d / manifest["patches"]).read_bytes(), dtype="<f8")
        if patches.size != n * k * k:
            raise DatasetError(f"{d}: patch blob holds {patches.size} values, expected {n * k * k}")
        sites, targets = [], []
        with open(d / "targets.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                sites.append(Site(float(row["easting"]), float(row["northing"]), math.nan, site_id=row["site_id"]))
                targets.append(float(row["target"]))
        with open(d / "folds.csv", newline="", encoding="utf-8") as fh:
            folds = [int(row["fold"]) for row in csv.DictReader(fh)]
        return cls(
            patches=patches.reshape(n, k, k).astype(np.float64),
            targets=np.array(targets),
            sites=sites,
            target_transform=manifest["target_transform"],
            fold_labels=np.array(folds, dtype=np.int64),
            k_folds=manifest["k_folds"],
            national_sd=manifest["national_sd"],
        )


def assemble_dataset(
    grid: Grid,
    sites: Sequence[Site],
    k: int = 32,
    transform: str = "identity",
    k_folds: int = 10,
    seed: int = 0,
    national_sd: float | None = None,
) -> tuple[Dataset, ExclusionReport]:
    """One record per usable site, in input order, plus a count of every exclusion.

    Exclusion reasons: ``na_target``, ``non_positive_log``, ``off_grid``,
    ``nodata_window``. ``national_sd`` defaults to the SD of ``grid``.
    """
    if transform not in TRANSFORMS:
        raise DatasetError(f"unknown target transform {transform!r}; choose from {TRANSFORMS}")
    if national_sd is None:
        national_sd = grid_stats(grid).sd
    report = ExclusionReport(total=len(sites))
    patches, targets, kept = [], [], []
    for site in sites:
        value = apply_detection_limit(site)
        if value is None or math.isnan(value):
            report.add("na_target", site.site_id)
            continue
        try:
            target = transform_target(value, transform, site.site_id)
        except TargetTransformError:
            report.add("non_positive_log", site.site_id)
            continue
        try:
            raw = extract_patch(grid, site.easting, site.northing, k)
        except PatchRejected as exc:
            report.add(exc.reason, site.site_id)
            continue
        patches.append(normalize_patch(raw, national_sd))
        targets.append(target)
        kept.append(site)
    report.accepted = len(kept)
    if not kept:
        raise DatasetError(f"no usable sites out of {len(sites)}: {dict(report.counts)}")
    if report.excluded:
        logger.info("dataset: %d of %d sites excluded %s", report.excluded, report.total, dict(report.counts))
    ds = Dataset(
        patches=np.stack(patches),
        targets=np.array(targets),
        sites=list(kept),
        target_transform=transform,
        fold_labels=split_folds(len(kept), k_folds, seed),
        k_folds=k_folds,
        national_sd=float(national_sd),
    )
    return ds, report
