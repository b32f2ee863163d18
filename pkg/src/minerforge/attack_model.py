"""Access -> entry point -> vulnerability -> capability -> objective model.

Findings map through a configurable (vulnerability class, entry point) ->
capability table. Capabilities form a strict hierarchy (remote code
execution >= configuration control >= hardware control >= disruption) and
profiles are closed downward under it. Each device is classified by the
strongest objective its capability profile enables, and per-vendor counts
are rolled up cumulatively: a device vulnerable to a stronger scenario
counts for every weaker one as well.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import MinerforgeError
from .catalog import Inventory
from .scanner import ENTRY_POINTS, VULN_CLASSES, Finding

log = logging.getLogger(__name__)

RCE = "RemoteCodeExecution"
CONFIG_CONTROL = "ConfigControl"
HARDWARE_CONTROL = "HardwareControl"
DISRUPTION = "Disruption"

# Strict hierarchy, strongest first.
CAPABILITIES = (RCE, CONFIG_CONTROL, HARDWARE_CONTROL, DISRUPTION)
_CAP_RANK = {name: len(CAPABILITIES) - i for i, name in enumerate(CAPABILITIES)}

WILDCARD_ENTRY = "*"


class MappingError(MinerforgeError):
    pass


@dataclass(frozen=True)
class Objective:
    name: str
    color: str
    rank: int

    def __str__(self) -> str:
        return self.name


FULL_TAKEOVER = Objective("FullTakeover", "red", 4)
REVENUE_REDIRECTION = Objective("RevenueRedirection", "orange", 3)
PHYSICAL_DEGRADATION = Objective("PhysicalDegradation", "yellow", 2)
PERFORMANCE_DISRUPTION = Objective("PerformanceDisruption", "blue", 1)
NO_OBJECTIVE = Objective("None", "black", 0)

OBJECTIVES = (
    FULL_TAKEOVER,
    REVENUE_REDIRECTION,
    PHYSICAL_DEGRADATION,
    PERFORMANCE_DISRUPTION,
    NO_OBJECTIVE,
)
SCENARIO_ROWS = OBJECTIVES[:4]  # the reportable attack scenarios

_OBJECTIVE_BY_NAME = {o.name: o for o in OBJECTIVES}
_CAP_TO_OBJECTIVE = {
    RCE: FULL_TAKEOVER,
    CONFIG_CONTROL: REVENUE_REDIRECTION,
    HARDWARE_CONTROL: PHYSICAL_DEGRADATION,
    DISRUPTION: PERFORMANCE_DISRUPTION,
}


def objective_by_name(name: str) -> Objective:
    try:
        return _OBJECTIVE_BY_NAME[name]
    except KeyError:
        raise MappingError(f"unknown objective {name!r}") from None


@dataclass(frozen=True)
class MapEntry:
    capability: str
    requires_on_path: bool = False


@dataclass
class MappingTable:
    """(vuln_class, entry_point) -> capability, with per-class wildcard
    fallback rows. Must cover every shipped vulnerability class."""

    entries: dict[tuple[str, str], MapEntry]

    def validate(self) -> None:
        for (vuln_class, entry_point), entry in self.entries.items():
            if vuln_class not in VULN_CLASSES:
                raise MappingError(f"unknown vulnerability class {vuln_class!r}")
            if entry_point != WILDCARD_ENTRY and entry_point not in ENTRY_POINTS:
                raise MappingError(f"unknown entry point {entry_point!r}")
            if entry.capability not in CAPABILITIES:
                raise MappingError(f"unknown capability {entry.capability!r}")
        missing = [
            c for c in VULN_CLASSES
            if not any(key[0] == c for key in self.entries)
        ]
        if missing:
            raise MappingError(f"mapping table not total; missing classes: {missing}")

    def lookup(self, vuln_class: str, entry_point: str) -> MapEntry | None:
        entry = self.entries.get((vuln_class, entry_point))
        if entry is None:
            entry = self.entries.get((vuln_class, WILDCARD_ENTRY))
        return entry

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "MappingTable":
        entries: dict[tuple[str, str], MapEntry] = {}
        for obj in records:
            key = (obj["class"], obj.get("entry_point", WILDCARD_ENTRY))
            entries[key] = MapEntry(
                capability=obj["capability"],
                requires_on_path=bool(obj.get("requires_on_path", False)),
            )
        table = cls(entries=entries)
        table.validate()
        return table

    @classmethod
    def load(cls, path: Path | str) -> "MappingTable":
        records = [
            json.loads(line)
            for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.lstrip().startswith("#")
        ]
        return cls.from_records(records)


def default_mapping_table() -> MappingTable:
    """Default capability edges, following the per-vendor exposure analyses
    rather than any single illustrative chain. Config-overridable."""
    entries = {
        ("WeakCredentials", "DebugSSH"): MapEntry(RCE),
        ("WeakCredentials", WILDCARD_ENTRY): MapEntry(CONFIG_CONTROL),
        ("SshEnabled", WILDCARD_ENTRY): MapEntry(DISRUPTION),
        ("NoUpdateSignature", "FirmwareUpdate"): MapEntry(RCE),
        ("NoUpdateSignature", WILDCARD_ENTRY): MapEntry(CONFIG_CONTROL),
        # on-path adversary required: plaintext pool traffic is a network-
        # position attack, so LAN-only reports may filter it out
        ("PlaintextStratum", WILDCARD_ENTRY): MapEntry(CONFIG_CONTROL, requires_on_path=True),
        ("PermissiveApiTrust", WILDCARD_ENTRY): MapEntry(CONFIG_CONTROL),
        ("WebAuthFlaw", WILDCARD_ENTRY): MapEntry(CONFIG_CONTROL),
        ("LegacyService", WILDCARD_ENTRY): MapEntry(DISRUPTION),
        ("ExposedMgmtDiscovery", WILDCARD_ENTRY): MapEntry(DISRUPTION),
        ("CookieWeakness", WILDCARD_ENTRY): MapEntry(CONFIG_CONTROL),
        ("UnsafeNative", WILDCARD_ENTRY): MapEntry(DISRUPTION),
        ("ChecksumOnlyBoot", "FirmwareUpdate"): MapEntry(RCE),
        ("ChecksumOnlyBoot", WILDCARD_ENTRY): MapEntry(DISRUPTION),
    }
    table = MappingTable(entries=entries)
    table.validate()
    return table


@dataclass
class CapabilityProfile:
    image_id: str
    capabilities: frozenset[str]
    contributing: list[tuple[str, str]] = field(default_factory=list)  # (rule_id, capability)

    def __post_init__(self) -> None:
        closed = downward_closure(self.capabilities)
        if closed != self.capabilities:
            self.capabilities = closed


def downward_closure(capabilities: Iterable[str]) -> frozenset[str]:
    caps = set(capabilities)
    if not caps:
        return frozenset()
    top = max(_CAP_RANK[c] for c in caps)
    return frozenset(c for c in CAPABILITIES if _CAP_RANK[c] <= top)


def infer_capabilities(
    findings: Sequence[Finding],
    table: MappingTable | None = None,
    include_on_path: bool = True,
) -> CapabilityProfile:
    """Union of mapped capabilities over one image's findings, closed
    downward. Findings whose class is absent from the table are ignored
    with a diagnostic. include_on_path=False drops edges that need an
    on-path network adversary (LAN-only view)."""
    table = table or default_mapping_table()
    image_ids = {f.image_id for f in findings}
    if len(image_ids) > 1:
        raise MappingError(f"findings span multiple images: {sorted(image_ids)}")
    image_id = next(iter(image_ids)) if image_ids else ""

    caps: set[str] = set()
    contributing: list[tuple[str, str]] = []
    for f in findings:
        entry = table.lookup(f.vuln_class, f.entry_point)
        if entry is None:
            log.warning(
                "finding %s: class %s not in mapping table, ignored", f.rule_id, f.vuln_class
            )
            continue
        if entry.requires_on_path and not include_on_path:
            continue
        caps.add(entry.capability)
        contributing.append((f.rule_id, entry.capability))
    return CapabilityProfile(
        image_id=image_id,
        capabilities=downward_closure(caps),
        contributing=sorted(set(contributing)),
    )


def dominant_scenario(profile: CapabilityProfile) -> Objective:
    """Strongest objective the capability profile enables."""
    for capability in CAPABILITIES:
        if capability in profile.capabilities:
            return _CAP_TO_OBJECTIVE[capability]
    return NO_OBJECTIVE


def compare_scenarios(a: Objective, b: Objective) -> int:
    """Total worst-case order (red > orange > yellow > blue > black):
    returns 1, 0 or -1."""
    if a.rank > b.rank:
        return 1
    if a.rank < b.rank:
        return -1
    return 0


@dataclass
class ScenarioMatrix:
    """Per-vendor counts of models enabling each scenario (cumulative), plus
    vendor totals and the separately reported unassessed models."""

    vendors: tuple[str, ...]
    rows: list[tuple[str, dict[str, int]]]
    vendor_totals: dict[str, int]
    unassessed: dict[str, int]

    def row(self, objective_name: str) -> dict[str, int]:
        for name, counts in self.rows:
            if name == objective_name:
                return counts
        raise KeyError(objective_name)


def scenario_matrix(
    objectives: Mapping[tuple[str, str], Objective | None],
    inventory: Inventory,
) -> ScenarioMatrix:
    """Roll model objectives up into the per-vendor scenario matrix.

    `objectives` maps (manufacturer, model_name) to the model's dominant
    objective; None (or a missing inventory model) means unassessed, which
    is excluded from every numerator and reported separately. A model
    counts in each row whose objective rank it meets or exceeds.
    """
    vendors = tuple(dict.fromkeys(m.manufacturer for m in inventory.models))
    totals = {v: 0 for v in vendors}
    unassessed = {v: 0 for v in vendors}
    counts = {o.name: {v: 0 for v in vendors} for o in SCENARIO_ROWS}

    known = set(objectives)
    for model in inventory.models:
        key = (model.manufacturer, model.model_name)
        totals[model.manufacturer] += 1
        objective = objectives.get(key) if key in known else None
        if objective is None:
            unassessed[model.manufacturer] += 1
            continue
        for row in SCENARIO_ROWS:
            if objective.rank >= row.rank:
                counts[row.name][model.manufacturer] += 1

    return ScenarioMatrix(
        vendors=vendors,
        rows=[(o.name, counts[o.name]) for o in SCENARIO_ROWS],
        vendor_totals=totals,
        unassessed=unassessed,
    )
