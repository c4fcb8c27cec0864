"""Two-level region geography (parent NUTS2 / child NUTS3)."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    DuplicateIdError,
    MissingParentError,
    NonPositiveLandAreaError,
    NotAParentError,
    SchemaMismatchError,
    UnknownRegionError,
)

REGIONS_HEADER = ["id", "level", "parent_id", "country", "zone", "land_area_ha"]


class Level(enum.Enum):
    PARENT = "NUTS2"
    CHILD = "NUTS3"


@dataclass(frozen=True)
class Region:
    id: str
    level: Level
    parent_id: str | None
    country: str
    agro_env_zone: str
    land_area: float


@dataclass
class RegionHierarchy:
    """Regions keyed by id plus a parent -> sorted children index.

    Build with :meth:`add_region`; treat as read-only afterwards.
    """

    regions: dict[str, Region] = field(default_factory=dict)
    index: dict[str, list[str]] = field(default_factory=dict)

    def add_region(self, region: Region) -> "RegionHierarchy":
        if region.id in self.regions:
            raise DuplicateIdError(f"region {region.id!r} already present")
        if not region.land_area > 0:
            raise NonPositiveLandAreaError(f"region {region.id!r}: land area {region.land_area} <= 0")
        if region.level is Level.CHILD:
            parent = self.regions.get(region.parent_id) if region.parent_id else None
            if parent is None or parent.level is not Level.PARENT:
                raise MissingParentError(f"child {region.id!r}: parent {region.parent_id!r} not present")
            kids = self.index[region.parent_id]
            kids.append(region.id)
            kids.sort()
        else:
            self.index[region.id] = []
        self.regions[region.id] = region
        return self

    def __getitem__(self, region_id: str) -> Region:
        try:
            return self.regions[region_id]
        except KeyError:
            raise UnknownRegionError(f"unknown region {region_id!r}") from None

    def __contains__(self, region_id: str) -> bool:
        return region_id in self.regions

    def children_of(self, parent_id: str) -> list[str]:
        region = self[parent_id]
        if region.level is not Level.PARENT:
            raise NotAParentError(f"{parent_id!r} is a {region.level.value} region")
        return list(self.index[parent_id])

    @property
    def parents(self) -> list[str]:
        return sorted(self.index)

    @property
    def children(self) -> list[str]:
        return sorted(r.id for r in self.regions.values() if r.level is Level.CHILD)

    def parent_of(self, child_id: str) -> str:
        return self[child_id].parent_id

    def validate(self) -> list[tuple[str, str]]:
        """Every invariant breach as ``(region_id, reason)``; empty means valid."""
        problems = []
        for r in sorted(self.regions.values(), key=lambda r: r.id):
            if not r.land_area > 0:
                problems.append((r.id, "land area must be positive"))
            if r.level is Level.PARENT:
                if not self.index.get(r.id):
                    problems.append((r.id, "parent has no children"))
                continue
            parent = self.regions.get(r.parent_id) if r.parent_id else None
            if parent is None or parent.level is not Level.PARENT:
                problems.append((r.id, f"parent {r.parent_id!r} missing"))
            elif parent.country != r.country:
                problems.append((r.id, f"country {r.country!r} differs from parent's {parent.country!r}"))
        return problems

    # ---------------------------------------------------------------- csv

    def to_csv(self, path, header_lines: list[str] = ()) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REGIONS_HEADER)
            # parents first so a streaming reader can rebuild in order
            ordered = [self.regions[p] for p in self.parents]
            ordered += [self.regions[c] for c in self.children]
            for r in ordered:
                w.writerow([r.id, r.level.value, r.parent_id or "", r.country, r.agro_env_zone, repr(r.land_area)])

    @classmethod
    def from_csv(cls, path) -> "RegionHierarchy":
        rows = list(_read_rows(path))
        if not rows or rows[0] != REGIONS_HEADER:
            raise SchemaMismatchError(f"{path}: header must be {','.join(REGIONS_HEADER)}")
        parents, children = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(REGIONS_HEADER):
                raise SchemaMismatchError(f"{path}:{lineno}: expected {len(REGIONS_HEADER)} fields")
            rid, level, parent_id, country, zone, land = row
            try:
                lvl = Level(level)
                area = float(land)
            except ValueError as exc:
                raise SchemaMismatchError(f"{path}:{lineno}: {exc}") from None
            if lvl is Level.PARENT and parent_id:
                raise SchemaMismatchError(f"{path}:{lineno}: NUTS2 row must have empty parent_id")
            if lvl is Level.CHILD and not parent_id:
                raise SchemaMismatchError(f"{path}:{lineno}: NUTS3 row needs a parent_id")
            region = Region(rid, lvl, parent_id or None, country, zone, area)
            (parents if lvl is Level.PARENT else children).append(region)
        h = cls()
        for r in parents + children:
            h.add_region(r)
        return h


def _read_rows(path):
    p = Path(path)
    with open(p, newline="", encoding="utf-8") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        yield from csv.reader(lines)
