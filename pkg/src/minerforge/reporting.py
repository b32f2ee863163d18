"""Aggregation of stage outcomes, fingerprints and scenario classifications
into the pipeline's report shapes, with deterministic rendering.

FunnelReport enforces its arithmetic (remaining[i] = remaining[i-1] -
removed[i]) at construction time, so an inconsistent funnel cannot be
built through the public interface. Rendering is byte-stable: fixed key
order, LF line endings, no timestamps.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from . import ConsistencyError, MinerforgeError
from .attack_model import ScenarioMatrix
from .catalog import ArtifactRecord
from .extractor import (
    STAGE_DECRYPTION,
    STAGE_DEDUPLICATION,
    STAGE_INTEGRITY,
    STAGE_RECONSTRUCTION,
    STAGES,
    VERDICT_PASS,
    VERDICT_REMOVED,
    StageOutcome,
)
from .scanner import MinerFingerprint, OsFingerprint

FORMAT_JSON_LINES = "json-lines"
FORMAT_CSV = "csv"
FORMAT_MARKDOWN = "markdown-table"
FORMATS = (FORMAT_JSON_LINES, FORMAT_CSV, FORMAT_MARKDOWN)

STAGE_DISPLAY = {
    STAGE_INTEGRITY: "Integrity filtering",
    STAGE_DECRYPTION: "Decryption step",
    STAGE_RECONSTRUCTION: "Reconstruction step",
    STAGE_DEDUPLICATION: "Deduplication",
}

SCENARIO_LABELS = {
    "FullTakeover": "Full device takeover",
    "RevenueRedirection": "Revenue redirection",
    "PhysicalDegradation": "Physical degradation",
    "PerformanceDisruption": "Performance disruption",
}


class RenderError(MinerforgeError):
    pass


@dataclass(frozen=True)
class FunnelStage:
    name: str
    remaining: int
    removed: int | None  # None on the initial row
    main_cause: str


@dataclass(frozen=True)
class FunnelReport:
    stages: tuple[FunnelStage, ...]

    def __post_init__(self) -> None:
        if not self.stages:
            raise ConsistencyError("funnel report needs at least the initial row")
        if self.stages[0].removed is not None:
            raise ConsistencyError("initial funnel row cannot have removals")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if cur.removed is None:
                raise ConsistencyError(f"stage {cur.name!r} missing removed count")
            if cur.remaining != prev.remaining - cur.removed:
                raise ConsistencyError(
                    f"funnel arithmetic violated at {cur.name!r}: "
                    f"{prev.remaining} - {cur.removed} != {cur.remaining}"
                )


def funnel_report(
    outcomes: Iterable[StageOutcome],
    initial_label: str = "Initial candidates",
    initial_cause: str = "",
) -> FunnelReport:
    """Aggregate per-stage outcomes into the reduction funnel.

    Consistency is enforced, not assumed: exactly one outcome per artifact
    per entered stage, and the population entering each stage must equal
    the survivors of the previous one. main_cause is the most frequent
    removal reason (ties break lexicographically).
    """
    by_stage: dict[str, dict[str, StageOutcome]] = {s: {} for s in STAGES}
    for outcome in outcomes:
        if outcome.stage not in by_stage:
            raise ConsistencyError(f"unknown stage {outcome.stage!r}")
        stage = by_stage[outcome.stage]
        if outcome.artifact_id in stage:
            raise ConsistencyError(
                f"duplicate outcome for artifact {outcome.artifact_id} at stage {outcome.stage}"
            )
        stage[outcome.artifact_id] = outcome

    entering = set(by_stage[STAGE_INTEGRITY])
    remaining = len(entering)
    rows = [FunnelStage(initial_label, remaining, None, initial_cause)]

    for stage_name in STAGES:
        stage = by_stage[stage_name]
        present = set(stage)
        if present != entering:
            missing = sorted(entering - present)[:3]
            extra = sorted(present - entering)[:3]
            raise ConsistencyError(
                f"stage {stage_name!r} outcomes inconsistent with entering set "
                f"(missing {missing}, unexpected {extra})"
            )
        removed = [o for o in stage.values() if o.verdict == VERDICT_REMOVED]
        survivors = {a for a, o in stage.items() if o.verdict == VERDICT_PASS}
        if len(removed) + len(survivors) != len(entering):
            raise ConsistencyError(f"stage {stage_name!r} has verdicts besides Pass/Removed")
        reasons = Counter(o.reason for o in removed)
        main_cause = min(reasons, key=lambda r: (-reasons[r], r)) if reasons else ""
        remaining -= len(removed)
        rows.append(FunnelStage(STAGE_DISPLAY[stage_name], remaining, len(removed), main_cause))
        entering = survivors

    return FunnelReport(stages=tuple(rows))


@dataclass(frozen=True)
class CorpusSummary:
    per_vendor_images: dict[str, int]
    per_class_artifacts: dict[str, int]
    os_families: dict[str, int]
    miner_software: dict[str, int]
    total_images: int
    total_artifacts: int

    def __post_init__(self) -> None:
        if sum(self.per_vendor_images.values()) != self.total_images:
            raise ConsistencyError("per-vendor image counts do not sum to total")
        if sum(self.per_class_artifacts.values()) != self.total_artifacts:
            raise ConsistencyError("per-class artifact counts do not sum to total")


def corpus_summary(
    catalog: Sequence[ArtifactRecord],
    images: Sequence,
    os_fingerprints: Sequence[OsFingerprint] = (),
    miner_fingerprints: Sequence[MinerFingerprint] = (),
) -> CorpusSummary:
    """Breakdowns over the final corpus. Every image must reference a
    cataloged artifact; a dangling reference is fatal."""
    by_artifact = {r.artifact_id: r for r in catalog}

    per_vendor: Counter[str] = Counter()
    for image in images:
        record = by_artifact.get(image.artifact_id)
        if record is None:
            raise ConsistencyError(
                f"image {image.image_id} references unknown artifact {image.artifact_id}"
            )
        per_vendor[record.manufacturer] += 1

    per_class: Counter[str] = Counter(r.artifact_class for r in catalog)
    os_counts: Counter[str] = Counter(fp.os_family for fp in os_fingerprints)
    miner_counts: Counter[str] = Counter(fp.miner_software for fp in miner_fingerprints)

    return CorpusSummary(
        per_vendor_images=dict(sorted(per_vendor.items())),
        per_class_artifacts=dict(sorted(per_class.items())),
        os_families=dict(sorted(os_counts.items())),
        miner_software=dict(sorted(miner_counts.items())),
        total_images=len(images),
        total_artifacts=len(catalog),
    )


# ---------------------------------------------------------------------------
# Rendering


def render(report, format: str = FORMAT_MARKDOWN) -> bytes:
    """Render a report object to bytes. Deterministic for identical input."""
    if format not in FORMATS:
        raise RenderError(f"unknown format {format!r}; expected one of {FORMATS}")
    if isinstance(report, FunnelReport):
        return _render_funnel(report, format)
    if isinstance(report, CorpusSummary):
        return _render_summary(report, format)
    if isinstance(report, ScenarioMatrix):
        return _render_matrix(report, format)
    raise RenderError(f"cannot render object of type {type(report).__name__}")


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> bytes:
    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return ("\n".join(lines) + "\n").encode("utf-8")


def _csv_bytes(rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    return buf.getvalue().encode("utf-8")


def _jsonl_bytes(objs: Iterable[Mapping]) -> bytes:
    return (
        "\n".join(json.dumps(o, separators=(",", ":")) for o in objs) + "\n"
    ).encode("utf-8")


def _render_funnel(report: FunnelReport, format: str) -> bytes:
    if format == FORMAT_MARKDOWN:
        rows = [
            (s.name, str(s.remaining), "--" if s.removed is None else str(s.removed), s.main_cause)
            for s in report.stages
        ]
        return _markdown_table(("Filtering stage", "Remaining", "Removed", "Main cause"), rows)
    if format == FORMAT_CSV:
        rows = [("stage", "remaining", "removed", "main_cause")]
        rows.extend(
            (s.name, s.remaining, "" if s.removed is None else s.removed, s.main_cause)
            for s in report.stages
        )
        return _csv_bytes(rows)
    return _jsonl_bytes(
        {
            "stage": s.name,
            "remaining": s.remaining,
            "removed": s.removed,
            "main_cause": s.main_cause,
        }
        for s in report.stages
    )


def parse_funnel(data: bytes) -> FunnelReport:
    """Inverse of the json-lines funnel rendering."""
    stages = []
    for line in data.decode("utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        stages.append(
            FunnelStage(obj["stage"], obj["remaining"], obj["removed"], obj["main_cause"])
        )
    return FunnelReport(stages=tuple(stages))


def _render_summary(summary: CorpusSummary, format: str) -> bytes:
    breakdowns = (
        ("per_vendor_images", summary.per_vendor_images, summary.total_images),
        ("per_class_artifacts", summary.per_class_artifacts, summary.total_artifacts),
        ("os_families", summary.os_families, sum(summary.os_families.values())),
        ("miner_software", summary.miner_software, sum(summary.miner_software.values())),
    )
    if format == FORMAT_MARKDOWN:
        rows = [
            (name, key, str(count))
            for name, counts, _total in breakdowns
            for key, count in counts.items()
        ]
        return _markdown_table(("Breakdown", "Key", "Count"), rows)
    if format == FORMAT_CSV:
        out: list[Sequence] = [("breakdown", "key", "count")]
        for name, counts, _total in breakdowns:
            out.extend((name, key, count) for key, count in counts.items())
        return _csv_bytes(out)
    return _jsonl_bytes(
        {"breakdown": name, "counts": counts, "total": total}
        for name, counts, total in breakdowns
    )


def parse_summary(data: bytes) -> CorpusSummary:
    """Inverse of the json-lines summary rendering."""
    by_name: dict[str, dict[str, int]] = {}
    totals: dict[str, int] = {}
    for line in data.decode("utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        by_name[obj["breakdown"]] = dict(obj["counts"])
        totals[obj["breakdown"]] = obj["total"]
    return CorpusSummary(
        per_vendor_images=by_name.get("per_vendor_images", {}),
        per_class_artifacts=by_name.get("per_class_artifacts", {}),
        os_families=by_name.get("os_families", {}),
        miner_software=by_name.get("miner_software", {}),
        total_images=totals.get("per_vendor_images", 0),
        total_artifacts=totals.get("per_class_artifacts", 0),
    )


def _render_matrix(matrix: ScenarioMatrix, format: str) -> bytes:
    if format == FORMAT_MARKDOWN:
        header = ["Attack scenario on LAN"] + [
            f"{v} ({matrix.vendor_totals[v]})" for v in matrix.vendors
        ]
        rows = [
            [SCENARIO_LABELS.get(name, name)] + [str(counts[v]) for v in matrix.vendors]
            for name, counts in matrix.rows
        ]
        table = _markdown_table(header, rows)
        if any(matrix.unassessed.values()):
            extra = ", ".join(
                f"{v} {n}" for v, n in matrix.unassessed.items() if n
            )
            table += f"\nUnassessed models (no usable artifacts): {extra}\n".encode("utf-8")
        return table
    if format == FORMAT_CSV:
        out: list[Sequence] = [["scenario", *matrix.vendors]]
        out.extend([name, *(counts[v] for v in matrix.vendors)] for name, counts in matrix.rows)
        out.append(["__vendor_totals__", *(matrix.vendor_totals[v] for v in matrix.vendors)])
        out.append(["__unassessed__", *(matrix.unassessed[v] for v in matrix.vendors)])
        return _csv_bytes(out)
    objs: list[Mapping] = [
        {
            "vendors": list(matrix.vendors),
            "vendor_totals": matrix.vendor_totals,
            "unassessed": matrix.unassessed,
        }
    ]
    objs.extend({"scenario": name, "counts": counts} for name, counts in matrix.rows)
    return _jsonl_bytes(objs)


def parse_matrix(data: bytes) -> ScenarioMatrix:
    """Inverse of the json-lines matrix rendering."""
    lines = [json.loads(l) for l in data.decode("utf-8").splitlines() if l.strip()]
    head, rows = lines[0], lines[1:]
    return ScenarioMatrix(
        vendors=tuple(head["vendors"]),
        rows=[(obj["scenario"], dict(obj["counts"])) for obj in rows],
        vendor_totals=dict(head["vendor_totals"]),
        unassessed=dict(head["unassessed"]),
    )
