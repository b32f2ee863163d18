from __future__ import annotations

import random
import shutil

import pytest

from minerforge.dedup import (
    Cluster,
    DedupError,
    ImageMeta,
    cluster,
    dedup_outcome_reasons,
    elect_representatives,
    make_seeds,
    select_representative,
    signature,
    signature_from_chunks,
    similarity,
)
from minerforge.extractor import FirmwareImage

SEEDS = make_seeds()


def oracle_jaccard(a: set[int], b: set[int]) -> float:
    # brute force, no shared code with the module under test
    if not a and not b:
        return 1.0
    inter = sum(1 for x in a if x in b)
    return inter / (len(a) + len(b) - inter)


def oracle_components(chunksets: dict[str, set[int]], threshold: float) -> list[list[str]]:
    ids = sorted(chunksets)
    adjacency = {i: set() for i in ids}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if oracle_jaccard(chunksets[a], chunksets[b]) >= threshold:
                adjacency[a].add(b)
                adjacency[b].add(a)
    seen: set[str] = set()
    components = []
    for start in ids:
        if start in seen:
            continue
        stack, component = [start], []
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            component.append(node)
            stack.extend(adjacency[node] - seen)
        components.append(sorted(component))
    return sorted(components)


def random_corpus(rng: random.Random, n_images: int) -> dict[str, set[int]]:
    """Synthetic chunk sets with planted near-duplicate groups."""
    corpus: dict[str, set[int]] = {}
    i = 0
    while len(corpus) < n_images:
        base = {rng.getrandbits(48) for _ in range(rng.randrange(50, 200))}
        group = min(rng.randrange(1, 5), n_images - len(corpus))
        for _ in range(group):
            variant = set(base)
            for _ in range(rng.randrange(0, max(2, len(base) // 15))):
                variant.discard(min(variant))
                variant.add(rng.getrandbits(48))
            corpus[f"img{i:03d}"] = variant
            i += 1
    return corpus


class TestSignatures:
    def test_identical_images_identical_signatures(self, fixtures_dir, tmp_path):
        src = fixtures_dir / "rootfs_mini"
        copy = tmp_path / "copy"
        shutil.copytree(src, copy)
        a = signature(FirmwareImage("a", "a", src), seeds=SEEDS)
        b = signature(FirmwareImage("b", "b", copy), seeds=SEEDS)
        assert a.chunk_hashes == b.chunk_hashes
        assert a.minhash == b.minhash

    def test_self_similarity_is_one(self, fixtures_dir):
        sig = signature(FirmwareImage("a", "a", fixtures_dir / "rootfs_mini"), seeds=SEEDS)
        assert similarity(sig, sig) == 1.0
        assert similarity(sig, sig, mode="exact") == 1.0

    def test_empty_image_rejected(self, tmp_path):
        (tmp_path / "root").mkdir()
        with pytest.raises(DedupError):
            signature(FirmwareImage("e", "e", tmp_path / "root"), seeds=SEEDS)

    def test_half_overlap_estimate_close_to_exact(self):
        rng = random.Random(21)
        shared = {rng.getrandbits(48) for _ in range(100)}
        a = shared | {rng.getrandbits(48) for _ in range(50)}
        b = shared | {rng.getrandbits(48) for _ in range(50)}
        sig_a = signature_from_chunks("a", a, SEEDS)
        sig_b = signature_from_chunks("b", b, SEEDS)
        exact = oracle_jaccard(a, b)
        assert abs(exact - 0.5) < 0.1  # construction sanity
        assert abs(similarity(sig_a, sig_b) - exact) <= 0.15
        assert similarity(sig_a, sig_b, mode="exact") == pytest.approx(exact)

    def test_disjoint_sets(self):
        a = signature_from_chunks("a", range(0, 100), SEEDS)
        b = signature_from_chunks("b", range(100, 200), SEEDS)
        assert similarity(a, b, mode="exact") == 0.0
        assert similarity(a, b) <= 0.15

    def test_symmetry(self):
        rng = random.Random(4)
        a = signature_from_chunks("a", {rng.getrandbits(48) for _ in range(80)}, SEEDS)
        b = signature_from_chunks("b", {rng.getrandbits(48) for _ in range(80)}, SEEDS)
        assert similarity(a, b) == similarity(b, a)

    def test_mismatched_seeds_rejected(self):
        other = make_seeds(master_seed=999)
        a = signature_from_chunks("a", range(50), SEEDS)
        b = signature_from_chunks("b", range(50), other)
        with pytest.raises(DedupError):
            similarity(a, b)

    def test_mismatched_k_rejected(self):
        short = make_seeds(k=64)
        a = signature_from_chunks("a", range(50), SEEDS)
        b = signature_from_chunks("b", range(50), short)
        with pytest.raises(DedupError):
            similarity(a, b)


class TestClustering:
    def test_all_distinct_singletons(self):
        rng = random.Random(8)
        sigs = [
            signature_from_chunks(f"i{n}", {rng.getrandbits(48) for _ in range(100)}, SEEDS)
            for n in range(10)
        ]
        clusters = cluster(sigs, threshold=0.9, mode="exact")
        assert all(len(c.members) == 1 for c in clusters)
        assert len(clusters) == 10

    def test_five_copies_one_cluster(self):
        chunks = set(range(1000, 1200))
        sigs = [signature_from_chunks(f"c{n}", chunks, SEEDS) for n in range(5)]
        clusters = cluster(sigs, threshold=0.9, mode="exact")
        assert len(clusters) == 1
        assert clusters[0].members == [f"c{n}" for n in range(5)]

    def test_exact_mode_matches_bruteforce_20_images(self):
        rng = random.Random(42)
        chunksets = random_corpus(rng, 20)
        sigs = [signature_from_chunks(i, cs, SEEDS) for i, cs in sorted(chunksets.items())]
        got = sorted(c.members for c in cluster(sigs, threshold=0.7, mode="exact"))
        assert got == oracle_components(chunksets, 0.7)

    def test_threshold_monotone_refinement(self):
        rng = random.Random(13)
        chunksets = random_corpus(rng, 15)
        sigs = [signature_from_chunks(i, cs, SEEDS) for i, cs in sorted(chunksets.items())]
        loose = cluster(sigs, threshold=0.5, mode="exact")
        tight = cluster(sigs, threshold=0.8, mode="exact")
        loose_of = {m: frozenset(c.members) for c in loose for m in c.members}
        for c in tight:
            containers = {loose_of[m] for m in c.members}
            assert len(containers) == 1  # raising the threshold never merges

    def test_bad_threshold_rejected(self):
        with pytest.raises(DedupError):
            cluster([], threshold=0.0)
        with pytest.raises(DedupError):
            cluster([], threshold=1.5)

    def test_evidence_edges_at_or_above_threshold(self):
        chunks = set(range(500))
        sigs = [signature_from_chunks(f"e{n}", chunks, SEEDS) for n in range(3)]
        clusters = cluster(sigs, threshold=0.9, mode="exact")
        assert all(s >= 0.9 for c in clusters for _, _, s in c.pairwise_evidence)


class TestRepresentative:
    def test_full_beats_partial(self):
        c = Cluster(members=["x", "y"])
        meta = {
            "x": ImageMeta("x", "Partial", 100, "1.0"),
            "y": ImageMeta("y", "Full", 5, "1.0"),
        }
        assert select_representative(c, meta).representative == "y"

    def test_file_count_breaks_completeness_tie(self):
        c = Cluster(members=["x", "y"])
        meta = {
            "x": ImageMeta("x", "Full", 10, "1.0"),
            "y": ImageMeta("y", "Full", 20, "1.0"),
        }
        assert select_representative(c, meta).representative == "y"

    def test_lexicographic_final_tiebreak(self):
        c = Cluster(members=["zeta", "alpha"])
        meta = {
            "zeta": ImageMeta("zeta", "Full", 10, "1.0"),
            "alpha": ImageMeta("alpha", "Full", 10, "1.0"),
        }
        assert select_representative(c, meta).representative == "alpha"

    def test_distinct_generation_flagged_for_retention(self):
        c = Cluster(members=["a", "b", "c"])
        meta = {
            "a": ImageMeta("a", "Full", 10, "FR-1.27"),
            "b": ImageMeta("b", "Full", 5, "FR-1.27"),
            "c": ImageMeta("c", "Full", 5, "FR-2.00"),
        }
        choice = select_representative(c, meta)
        assert choice.representative == "a"
        assert choice.retained_variants == ["c"]

    def test_order_independent(self):
        rng = random.Random(3)
        members = [f"m{i}" for i in range(8)]
        meta = {
            m: ImageMeta(m, rng.choice(["Full", "Partial"]), rng.randrange(1, 50), "g")
            for m in members
        }
        baseline = select_representative(Cluster(members=list(members)), meta)
        for _ in range(10):
            shuffled = list(members)
            rng.shuffle(shuffled)
            assert select_representative(Cluster(members=shuffled), meta) == baseline

    def test_empty_cluster_rejected(self):
        with pytest.raises(DedupError):
            select_representative(Cluster(members=[]), {})

    def test_outcome_reasons(self):
        clusters = [Cluster(members=["a", "b", "c"])]
        meta = {
            "a": ImageMeta("a", "Full", 10, "1.0"),
            "b": ImageMeta("b", "Full", 5, "1.0"),
            "c": ImageMeta("c", "Full", 5, "2.0"),
        }
        elect_representatives(clusters, meta)
        reasons = dedup_outcome_reasons(clusters)
        assert reasons["a"] == ("Pass", "cluster representative")
        assert reasons["c"] == ("Pass", "retained cross-version variant")
        assert reasons["b"][0] == "Removed"
