from __future__ import annotations

import itertools
import random

import pytest

from minerforge.attack_model import (
    CAPABILITIES,
    CONFIG_CONTROL,
    DISRUPTION,
    FULL_TAKEOVER,
    HARDWARE_CONTROL,
    NO_OBJECTIVE,
    OBJECTIVES,
    PERFORMANCE_DISRUPTION,
    PHYSICAL_DEGRADATION,
    RCE,
    REVENUE_REDIRECTION,
    CapabilityProfile,
    MappingError,
    MappingTable,
    MapEntry,
    compare_scenarios,
    default_mapping_table,
    dominant_scenario,
    downward_closure,
    infer_capabilities,
    objective_by_name,
    scenario_matrix,
)
from minerforge.catalog import Inventory, MinerModel
from minerforge.scanner import ENTRY_POINTS, VULN_CLASSES, Finding


def finding(vuln_class: str, entry_point: str, image_id: str = "img") -> Finding:
    return Finding(
        rule_id=f"r-{vuln_class}-{entry_point}",
        image_id=image_id,
        evidence_path="etc/x",
        matched_excerpt="",
        vuln_class=vuln_class,
        entry_point=entry_point,
        severity="High",
    )


class TestInferCapabilities:
    def test_weak_ssh_credentials_full_closure(self):
        profile = infer_capabilities(
            [finding("WeakCredentials", "DebugSSH"), finding("SshEnabled", "DebugSSH")]
        )
        assert profile.capabilities == frozenset(CAPABILITIES)

    def test_web_auth_flaw_config_control(self):
        profile = infer_capabilities([finding("WebAuthFlaw", "WebUI")])
        assert profile.capabilities == frozenset(
            {CONFIG_CONTROL, HARDWARE_CONTROL, DISRUPTION}
        )

    def test_no_findings_no_capabilities(self):
        assert infer_capabilities([]).capabilities == frozenset()

    def test_unknown_class_ignored_with_diagnostic(self, caplog):
        table = MappingTable(
            entries={(c, "*"): MapEntry(DISRUPTION) for c in VULN_CLASSES}
        )
        rogue = Finding("r", "img", "p", "", "WeakCredentials", "DebugSSH", "High")
        object.__setattr__(rogue, "vuln_class", "NotMapped")
        with caplog.at_level("WARNING"):
            profile = infer_capabilities([rogue], table)
        assert profile.capabilities == frozenset()
        assert "not in mapping table" in caplog.text

    def test_on_path_filter_drops_stratum(self):
        lan_only = infer_capabilities(
            [finding("PlaintextStratum", "Network")], include_on_path=False
        )
        assert lan_only.capabilities == frozenset()
        with_path = infer_capabilities([finding("PlaintextStratum", "Network")])
        assert CONFIG_CONTROL in with_path.capabilities

    def test_mixed_images_rejected(self):
        with pytest.raises(MappingError):
            infer_capabilities(
                [finding("WebAuthFlaw", "WebUI", "a"), finding("WebAuthFlaw", "WebUI", "b")]
            )

    def test_contributing_records_edges(self):
        profile = infer_capabilities([finding("LegacyService", "Network")])
        assert profile.contributing == [("r-LegacyService-Network", DISRUPTION)]


class TestDownwardClosure:
    def test_rce_implies_all(self):
        assert downward_closure({RCE}) == frozenset(CAPABILITIES)

    def test_profile_constructor_closes(self):
        profile = CapabilityProfile(image_id="x", capabilities=frozenset({CONFIG_CONTROL}))
        assert profile.capabilities == frozenset({CONFIG_CONTROL, HARDWARE_CONTROL, DISRUPTION})

    def test_empty_stays_empty(self):
        assert downward_closure(set()) == frozenset()


class TestDominantScenario:
    def test_disruption_only(self):
        profile = CapabilityProfile("x", frozenset({DISRUPTION}))
        assert dominant_scenario(profile) == PERFORMANCE_DISRUPTION

    def test_rce_full_takeover(self):
        profile = CapabilityProfile("x", frozenset({RCE}))
        assert dominant_scenario(profile) == FULL_TAKEOVER

    def test_empty_profile_none(self):
        assert dominant_scenario(CapabilityProfile("x", frozenset())) == NO_OBJECTIVE
        assert NO_OBJECTIVE.color == "black"


class TestCompareScenarios:
    def test_takeover_beats_redirection(self):
        assert compare_scenarios(FULL_TAKEOVER, REVENUE_REDIRECTION) == 1

    def test_reflexive_equal(self):
        for objective in OBJECTIVES:
            assert compare_scenarios(objective, objective) == 0

    def test_max_of_subset(self):
        subset = [PERFORMANCE_DISRUPTION, REVENUE_REDIRECTION, PHYSICAL_DEGRADATION]
        best = subset[0]
        for o in subset[1:]:
            if compare_scenarios(o, best) > 0:
                best = o
        assert best == REVENUE_REDIRECTION

    def test_total_order_laws(self):
        for a, b in itertools.product(OBJECTIVES, repeat=2):
            assert compare_scenarios(a, b) == -compare_scenarios(b, a)  # antisymmetry
            assert compare_scenarios(a, b) in (-1, 0, 1)  # totality
        for a, b, c in itertools.product(OBJECTIVES, repeat=3):
            if compare_scenarios(a, b) >= 0 and compare_scenarios(b, c) >= 0:
                assert compare_scenarios(a, c) >= 0  # transitivity

    def test_color_ordering(self):
        colors = [o.color for o in sorted(OBJECTIVES, key=lambda o: -o.rank)]
        assert colors == ["red", "orange", "yellow", "blue", "black"]


class TestMonotonicity:
    def test_superset_never_weaker(self):
        rng = random.Random(99)
        space = [(c, e) for c in VULN_CLASSES for e in ENTRY_POINTS]
        for _ in range(200):
            smaller = rng.sample(space, rng.randrange(0, 6))
            extra = rng.sample(space, rng.randrange(0, 6))
            f_small = [finding(c, e) for c, e in smaller]
            f_big = f_small + [finding(c, e) for c, e in extra]
            low = dominant_scenario(infer_capabilities(f_small))
            high = dominant_scenario(infer_capabilities(f_big))
            assert compare_scenarios(high, low) >= 0


class TestMappingTable:
    def test_default_is_total(self):
        default_mapping_table().validate()

    def test_missing_class_rejected(self):
        table = MappingTable(entries={("WeakCredentials", "*"): MapEntry(RCE)})
        with pytest.raises(MappingError, match="not total"):
            table.validate()

    def test_exact_beats_wildcard(self):
        table = default_mapping_table()
        assert table.lookup("WeakCredentials", "DebugSSH").capability == RCE
        assert table.lookup("WeakCredentials", "WebUI").capability == CONFIG_CONTROL

    def test_load_from_records(self):
        records = [
            {"class": c, "entry_point": "*", "capability": DISRUPTION} for c in VULN_CLASSES
        ]
        table = MappingTable.from_records(records)
        assert table.lookup("SshEnabled", "DebugSSH").capability == DISRUPTION

    def test_load_from_file(self, tmp_path):
        import json

        path = tmp_path / "mapping.jsonl"
        path.write_text(
            "\n".join(
                json.dumps({"class": c, "capability": DISRUPTION}) for c in VULN_CLASSES
            )
            + "\n"
        )
        MappingTable.load(path).validate()

    def test_unknown_capability_rejected(self):
        with pytest.raises(MappingError):
            MappingTable.from_records(
                [{"class": "WeakCredentials", "capability": "Teleportation"}]
            )


def _inventory(spec: dict[str, int]) -> Inventory:
    models = [
        MinerModel(vendor, f"{vendor}-{i:03d}")
        for vendor, count in spec.items()
        for i in range(count)
    ]
    return Inventory(models=models)


class TestScenarioMatrix:
    def test_single_rce_model_counts_everywhere(self):
        inventory = _inventory({"Bitmain": 1})
        matrix = scenario_matrix({("Bitmain", "Bitmain-000"): FULL_TAKEOVER}, inventory)
        for _, counts in matrix.rows:
            assert counts["Bitmain"] == 1

    def test_empty_profiles_zero_matrix(self):
        inventory = _inventory({"Bitmain": 3, "Canaan": 2})
        matrix = scenario_matrix({}, inventory)
        assert all(c == 0 for _, counts in matrix.rows for c in counts.values())
        assert matrix.unassessed == {"Bitmain": 3, "Canaan": 2}

    def test_rows_cumulative_non_decreasing(self):
        rng = random.Random(5)
        inventory = _inventory({"Bitmain": 20, "MicroBT": 10, "Canaan": 6})
        objectives = {}
        for model in inventory.models:
            pick = rng.choice(list(OBJECTIVES) + [None])
            objectives[(model.manufacturer, model.model_name)] = pick
        matrix = scenario_matrix(objectives, inventory)
        for vendor in matrix.vendors:
            column = [counts[vendor] for _, counts in matrix.rows]
            assert column == sorted(column)

    def test_unassessed_excluded_from_numerator(self):
        inventory = _inventory({"Iceriver": 4})
        objectives = {
            ("Iceriver", "Iceriver-000"): REVENUE_REDIRECTION,
            ("Iceriver", "Iceriver-001"): None,
        }
        matrix = scenario_matrix(objectives, inventory)
        assert matrix.row("RevenueRedirection")["Iceriver"] == 1
        assert matrix.unassessed["Iceriver"] == 3
        assert matrix.vendor_totals["Iceriver"] == 4

    def test_objective_by_name(self):
        assert objective_by_name("FullTakeover") is FULL_TAKEOVER
        with pytest.raises(MappingError):
            objective_by_name("Nope")
