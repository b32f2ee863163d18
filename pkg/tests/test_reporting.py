from __future__ import annotations

import random

import pytest

from minerforge import ConsistencyError
from minerforge.attack_model import (
    FULL_TAKEOVER,
    PERFORMANCE_DISRUPTION,
    REVENUE_REDIRECTION,
    scenario_matrix,
)
from minerforge.catalog import ArtifactRecord, Inventory, MinerModel
from minerforge.extractor import (
    STAGE_DECRYPTION,
    STAGE_DEDUPLICATION,
    STAGE_INTEGRITY,
    STAGE_RECONSTRUCTION,
    STAGES,
    StageOutcome,
)
from minerforge.reporting import (
    FunnelReport,
    FunnelStage,
    RenderError,
    corpus_summary,
    funnel_report,
    parse_funnel,
    parse_matrix,
    parse_summary,
    render,
)
from minerforge.scanner import MinerFingerprint, OsFingerprint


def scripted_outcomes(total: int, removed_per_stage: dict[str, int],
                      reasons: dict[str, str]) -> list[StageOutcome]:
    """Deterministic outcome stream: the first artifacts of the surviving
    population are removed at each stage."""
    outcomes = []
    alive = [f"a{i:04d}" for i in range(total)]
    for stage in STAGES:
        removed = removed_per_stage.get(stage, 0)
        for i, artifact in enumerate(alive):
            verdict = "Removed" if i < removed else "Pass"
            outcomes.append(StageOutcome(stage, artifact, verdict, reasons.get(stage, "ok")))
        alive = alive[removed:]
    return outcomes


class TestFunnelReport:
    def test_single_artifact_all_pass(self):
        outcomes = [StageOutcome(stage, "a0", "Pass", "fine") for stage in STAGES]
        report = funnel_report(outcomes)
        assert [s.remaining for s in report.stages] == [1, 1, 1, 1, 1]
        assert [s.removed for s in report.stages] == [None, 0, 0, 0, 0]

    def test_ten_artifacts_hand_computed(self):
        outcomes = scripted_outcomes(
            10,
            {STAGE_INTEGRITY: 2, STAGE_DECRYPTION: 1, STAGE_RECONSTRUCTION: 3,
             STAGE_DEDUPLICATION: 1},
            {STAGE_INTEGRITY: "broken", STAGE_DECRYPTION: "keyless",
             STAGE_RECONSTRUCTION: "partial", STAGE_DEDUPLICATION: "duplicate"},
        )
        report = funnel_report(outcomes)
        # oracle: spreadsheet-style recount of the scripted verdicts
        assert [s.remaining for s in report.stages] == [10, 8, 7, 4, 3]
        assert [s.removed for s in report.stages] == [None, 2, 1, 3, 1]
        assert [s.main_cause for s in report.stages][1:] == [
            "broken", "keyless", "partial", "duplicate"
        ]

    def test_missing_stage_outcome_fatal(self):
        outcomes = [StageOutcome(STAGE_INTEGRITY, "a0", "Pass", "ok")]
        with pytest.raises(ConsistencyError):
            funnel_report(outcomes)

    def test_duplicate_outcome_fatal(self):
        outcomes = [StageOutcome(stage, "a0", "Pass", "ok") for stage in STAGES]
        outcomes.append(StageOutcome(STAGE_INTEGRITY, "a0", "Pass", "again"))
        with pytest.raises(ConsistencyError, match="duplicate"):
            funnel_report(outcomes)

    def test_removed_artifact_must_leave_pipeline(self):
        outcomes = [
            StageOutcome(STAGE_INTEGRITY, "a0", "Removed", "broken"),
            StageOutcome(STAGE_DECRYPTION, "a0", "Pass", "zombie"),
        ]
        with pytest.raises(ConsistencyError):
            funnel_report(outcomes)

    def test_main_cause_tie_breaks_lexicographically(self):
        outcomes = []
        for i, reason in enumerate(["zeta", "alpha"]):
            outcomes.append(StageOutcome(STAGE_INTEGRITY, f"a{i}", "Removed", reason))
        outcomes.append(StageOutcome(STAGE_INTEGRITY, "keeper", "Pass", "ok"))
        for stage in STAGES[1:]:
            outcomes.append(StageOutcome(stage, "keeper", "Pass", "ok"))
        report = funnel_report(outcomes)
        assert report.stages[1].main_cause == "alpha"

    def test_constructor_enforces_arithmetic(self):
        with pytest.raises(ConsistencyError):
            FunnelReport(
                stages=(
                    FunnelStage("Initial candidates", 10, None, ""),
                    FunnelStage("Integrity filtering", 5, 3, "x"),  # 10-3 != 5
                )
            )

    def test_random_scripted_funnels_hold_invariant(self):
        rng = random.Random(1234)
        for _ in range(50):
            total = rng.randrange(1, 60)
            removals, alive = {}, total
            for stage in STAGES:
                removals[stage] = rng.randrange(0, alive + 1)
                alive -= removals[stage]
            report = funnel_report(scripted_outcomes(total, removals, {}))
            for prev, cur in zip(report.stages, report.stages[1:]):
                assert cur.remaining == prev.remaining - cur.removed
            assert report.stages[-1].remaining == alive


def _catalog_with_classes(class_counts: dict[str, int]) -> list[ArtifactRecord]:
    records = []
    i = 0
    for cls, count in class_counts.items():
        for _ in range(count):
            digest = f"{i:016x}" + "0" * 48
            records.append(
                ArtifactRecord(
                    artifact_id=digest[:16],
                    content_hash=digest,
                    size_bytes=1,
                    manufacturer="Bitmain",
                    artifact_class=cls,
                    source_paths=[f"f{i}"],
                )
            )
            i += 1
    return records


class _StubImage:
    def __init__(self, image_id: str, artifact_id: str) -> None:
        self.image_id = image_id
        self.artifact_id = artifact_id


class TestCorpusSummary:
    def test_final_corpus_vendor_replay(self):
        vendor_counts = {"Bitmain": 102, "MicroBT": 9, "Canaan": 12, "Iceriver": 11}
        records, images = [], []
        i = 0
        for vendor, count in vendor_counts.items():
            for _ in range(count):
                digest = f"{i:016x}" + "0" * 48
                records.append(
                    ArtifactRecord(
                        artifact_id=digest[:16], content_hash=digest, size_bytes=1,
                        manufacturer=vendor, source_paths=[f"f{i}"],
                    )
                )
                images.append(_StubImage(f"img{i}", digest[:16]))
                i += 1
        summary = corpus_summary(records, images)
        assert summary.per_vendor_images == {
            "Bitmain": 102, "Canaan": 12, "Iceriver": 11, "MicroBT": 9
        }
        assert summary.total_images == 134

    def test_artifact_class_replay(self):
        class_counts = {
            "UpdatePackage": 260, "FlashImage": 611, "ManagementTool": 2592,
            "Documentation": 767, "Other": 410,
        }
        summary = corpus_summary(_catalog_with_classes(class_counts), [])
        assert summary.per_class_artifacts == dict(sorted(class_counts.items()))
        assert summary.total_artifacts == 4640

    def test_empty_corpus(self):
        summary = corpus_summary([], [])
        assert summary.total_images == 0
        assert summary.total_artifacts == 0
        assert summary.per_vendor_images == {}

    def test_dangling_image_reference_fatal(self):
        with pytest.raises(ConsistencyError, match="unknown artifact"):
            corpus_summary([], [_StubImage("img0", "deadbeef")])

    def test_os_unknowns_reported(self):
        records = _catalog_with_classes({"Other": 2})
        images = [_StubImage(f"i{n}", records[n].artifact_id) for n in range(2)]
        summary = corpus_summary(
            records,
            images,
            os_fingerprints=[
                OsFingerprint("i0", "OpenWrt"), OsFingerprint("i1", "Unknown")
            ],
            miner_fingerprints=[MinerFingerprint("i0", "cgminer", "4.9.2")],
        )
        assert summary.os_families == {"OpenWrt": 1, "Unknown": 1}
        assert summary.miner_software == {"cgminer": 1}


def _table2_report() -> FunnelReport:
    reasons = {
        STAGE_INTEGRITY: "Corrupted / invalid files",
        STAGE_DECRYPTION: "Encrypted / unsupported formats",
        STAGE_RECONSTRUCTION: "Partial / incremental updates",
        STAGE_DEDUPLICATION: "Redundant variants",
    }
    removals = {
        STAGE_INTEGRITY: 51, STAGE_DECRYPTION: 130,
        STAGE_RECONSTRUCTION: 78, STAGE_DEDUPLICATION: 478,
    }
    outcomes = scripted_outcomes(871, removals, reasons)
    return funnel_report(outcomes, initial_cause="Flash + update artifacts")


class TestRender:
    def test_funnel_markdown_exact_layout(self):
        text = render(_table2_report(), "markdown-table").decode()
        assert text == (
            "| Filtering stage | Remaining | Removed | Main cause |\n"
            "| --- | --- | --- | --- |\n"
            "| Initial candidates | 871 | -- | Flash + update artifacts |\n"
            "| Integrity filtering | 820 | 51 | Corrupted / invalid files |\n"
            "| Decryption step | 690 | 130 | Encrypted / unsupported formats |\n"
            "| Reconstruction step | 612 | 78 | Partial / incremental updates |\n"
            "| Deduplication | 134 | 478 | Redundant variants |\n"
        )

    def test_render_deterministic(self):
        report = _table2_report()
        for fmt in ("json-lines", "csv", "markdown-table"):
            assert render(report, fmt) == render(report, fmt)

    def test_funnel_jsonl_round_trip(self):
        report = _table2_report()
        assert parse_funnel(render(report, "json-lines")) == report

    def test_summary_jsonl_round_trip(self):
        summary = corpus_summary(_catalog_with_classes({"Other": 3, "FlashImage": 2}), [])
        assert parse_summary(render(summary, "json-lines")) == summary

    def test_matrix_round_trip_and_header(self):
        inventory = Inventory(
            models=[MinerModel("Bitmain", "S19"), MinerModel("MicroBT", "M30S")]
        )
        matrix = scenario_matrix(
            {("Bitmain", "S19"): FULL_TAKEOVER, ("MicroBT", "M30S"): PERFORMANCE_DISRUPTION},
            inventory,
        )
        text = render(matrix, "markdown-table").decode()
        assert text.splitlines()[0] == (
            "| Attack scenario on LAN | Bitmain (1) | MicroBT (1) |"
        )
        assert parse_matrix(render(matrix, "json-lines")) == matrix

    def test_matrix_unassessed_appendix(self):
        inventory = Inventory(
            models=[MinerModel("Canaan", "A1566"), MinerModel("Canaan", "A16XP")]
        )
        matrix = scenario_matrix({("Canaan", "A1566"): REVENUE_REDIRECTION}, inventory)
        text = render(matrix, "markdown-table").decode()
        assert "Unassessed models" in text
        assert "Canaan 1" in text

    def test_empty_summary_headers_only(self):
        summary = corpus_summary([], [])
        text = render(summary, "markdown-table").decode()
        assert text.splitlines()[0] == "| Breakdown | Key | Count |"
        assert len(text.splitlines()) == 2

    def test_unknown_format_rejected(self):
        with pytest.raises(RenderError):
            render(_table2_report(), "yaml")

    def test_unknown_object_rejected(self):
        with pytest.raises(RenderError):
            render({"not": "a report"}, "csv")

    def test_csv_funnel(self):
        data = render(_table2_report(), "csv").decode()
        lines = data.splitlines()
        assert lines[0] == "stage,remaining,removed,main_cause"
        assert lines[1].startswith("Initial candidates,871,,")
        assert len(lines) == 6
