"""Binary-similarity deduplication of reconstructed firmware images.

Each image is reduced to the set of 64-bit hashes of its fixed-size content
chunks (files concatenated in canonical path order). Similarity is Jaccard
overlap of those chunk sets, either exact or estimated through a k-
coordinate minhash sketch. Images are clustered as connected components of
the similarity graph at a threshold, and one representative is elected per
cluster; variants with a different firmware generation are flagged for
retention. Structural (function-level) comparison is out of scope.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import MinerforgeError
from .extractor import COMPLETENESS_FULL, FirmwareImage

DEFAULT_CHUNK_SIZE = 4096
DEFAULT_K = 128
DEFAULT_THRESHOLD = 0.90
DEFAULT_MASTER_SEED = 0x6D666467  # stable across runs; k seeds derive from it

MODE_EXACT = "exact"
MODE_ESTIMATED = "estimated"


class DedupError(MinerforgeError):
    pass


class Seeds(NamedTuple):
    """Multiply-shift hash parameters (odd multiplier, additive) per
    minhash coordinate, plus a fingerprint for compatibility checks."""

    params: tuple[tuple[int, int], ...]
    fingerprint: str


def make_seeds(k: int = DEFAULT_K, master_seed: int = DEFAULT_MASTER_SEED) -> Seeds:
    rng = random.Random(master_seed)
    params = tuple(
        (rng.getrandbits(64) | 1, rng.getrandbits(64)) for _ in range(k)
    )
    digest = hashlib.sha256(repr((k, master_seed)).encode()).hexdigest()[:12]
    return Seeds(params, digest)


@dataclass
class SimilaritySignature:
    image_id: str
    chunk_hashes: frozenset[int]
    minhash: tuple[int, ...]
    seed_fingerprint: str

    @property
    def k(self) -> int:
        return len(self.minhash)


@dataclass
class Cluster:
    members: list[str]
    representative: str = ""
    retained_variants: list[str] = field(default_factory=list)
    pairwise_evidence: list[tuple[str, str, float]] = field(default_factory=list)


@dataclass(frozen=True)
class ImageMeta:
    """The metadata slice representative election needs."""

    image_id: str
    completeness: str = "Partial"
    file_count: int = 0
    generation: str = "unknown"


def _chunk_hashes_from_bytes(blobs: Iterable[bytes], chunk_size: int) -> frozenset[int]:
    hashes: set[int] = set()
    pending = b""
    for blob in blobs:
        pending += blob
        while len(pending) >= chunk_size:
            chunk, pending = pending[:chunk_size], pending[chunk_size:]
            hashes.add(_hash64(chunk))
    if pending:
        hashes.add(_hash64(pending))
    return frozenset(hashes)


def _hash64(chunk: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(chunk, digest_size=8).digest(), "big")


def minhash_vector(chunk_hashes: frozenset[int], seeds: Seeds) -> tuple[int, ...]:
    """k minimum values of multiply-shift hashes over the chunk-hash set."""
    if not chunk_hashes:
        raise DedupError("cannot sketch an empty chunk set")
    xs = np.fromiter(chunk_hashes, dtype=np.uint64, count=len(chunk_hashes))
    mins = []
    for a, b in seeds.params:
        # uint64 arithmetic wraps mod 2^64, which is the hash family here
        hashed = xs * np.uint64(a) + np.uint64(b)
        mins.append(int(hashed.min()))
    return tuple(mins)


def signature_from_chunks(
    image_id: str, chunk_hashes: Iterable[int], seeds: Seeds
) -> SimilaritySignature:
    chunks = frozenset(int(c) & 0xFFFFFFFFFFFFFFFF for c in chunk_hashes)
    return SimilaritySignature(
        image_id=image_id,
        chunk_hashes=chunks,
        minhash=minhash_vector(chunks, seeds),
        seed_fingerprint=seeds.fingerprint,
    )


def signature(
    image: FirmwareImage,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    seeds: Seeds | None = None,
) -> SimilaritySignature:
    """Sketch one image: canonical-path-order concatenation, fixed-size
    chunking, 64-bit chunk hashes, minhash vector."""
    seeds = seeds or make_seeds()
    files = image.iter_files()
    if not files:
        raise DedupError(f"image {image.image_id} is empty")
    chunks = _chunk_hashes_from_bytes((p.read_bytes() for p in files), chunk_size)
    return SimilaritySignature(
        image_id=image.image_id,
        chunk_hashes=chunks,
        minhash=minhash_vector(chunks, seeds),
        seed_fingerprint=seeds.fingerprint,
    )


def exact_jaccard(a: frozenset[int], b: frozenset[int]) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def similarity(a: SimilaritySignature, b: SimilaritySignature, mode: str = MODE_ESTIMATED) -> float:
    """Similarity in [0,1]; symmetric. Estimated mode is the fraction of
    matching minhash coordinates; exact mode is true Jaccard."""
    if mode == MODE_EXACT:
        return exact_jaccard(a.chunk_hashes, b.chunk_hashes)
    if a.k != b.k or a.seed_fingerprint != b.seed_fingerprint:
        raise DedupError("signatures built with different k/seeds are not comparable")
    matches = sum(1 for x, y in zip(a.minhash, b.minhash) if x == y)
    return matches / a.k


class _UnionFind:
    def __init__(self, items: Sequence[str]) -> None:
        self.parent = {x: x for x in items}

    def find(self, x: str) -> str:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root wins, keeps components deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def cluster(
    signatures: Sequence[SimilaritySignature],
    threshold: float = DEFAULT_THRESHOLD,
    mode: str = MODE_ESTIMATED,
) -> list[Cluster]:
    """Connected components of the graph with edges where similarity >=
    threshold. Members sorted; clusters ordered by smallest member."""
    if not 0.0 < threshold <= 1.0:
        raise DedupError(f"threshold must be in (0, 1], got {threshold}")
    if mode not in (MODE_EXACT, MODE_ESTIMATED):
        raise DedupError(f"unknown mode {mode!r}")
    ids = [s.image_id for s in signatures]
    if len(set(ids)) != len(ids):
        raise DedupError("duplicate image_id among signatures")

    uf = _UnionFind(ids)
    edges: dict[str, list[tuple[str, str, float]]] = {}
    ordered = sorted(signatures, key=lambda s: s.image_id)
    for i, a in enumerate(ordered):
        for b in ordered[i + 1:]:
            sim = similarity(a, b, mode)
            if sim >= threshold:
                uf.union(a.image_id, b.image_id)
                edges.setdefault(a.image_id, []).append((a.image_id, b.image_id, round(sim, 6)))

    groups: dict[str, list[str]] = {}
    for image_id in ids:
        groups.setdefault(uf.find(image_id), []).append(image_id)

    clusters = []
    for root in sorted(groups):
        members = sorted(groups[root])
        member_set = set(members)
        evidence = [
            e
            for a_id in members
            for e in edges.get(a_id, [])
            if e[1] in member_set
        ]
        clusters.append(Cluster(members=members, pairwise_evidence=evidence))
    return clusters


class RepresentativeChoice(NamedTuple):
    representative: str
    retained_variants: list[str]


def select_representative(
    c: Cluster, images: Mapping[str, ImageMeta]
) -> RepresentativeChoice:
    """Elect the cluster representative: completeness (Full first), then
    file count, then lexicographically smallest image_id. Members whose
    generation differs from the representative's are flagged for retention
    as cross-version variants."""
    if not c.members:
        raise DedupError("cannot elect a representative from an empty cluster")

    def meta(image_id: str) -> ImageMeta:
        return images.get(image_id, ImageMeta(image_id=image_id))

    def key(image_id: str):
        m = meta(image_id)
        return (
            0 if m.completeness == COMPLETENESS_FULL else 1,
            -m.file_count,
            image_id,
        )

    representative = min(c.members, key=key)
    rep_generation = meta(representative).generation
    retained = sorted(
        m for m in c.members
        if m != representative and meta(m).generation != rep_generation
    )
    return RepresentativeChoice(representative, retained)


def elect_representatives(
    clusters: Iterable[Cluster], images: Mapping[str, ImageMeta]
) -> list[Cluster]:
    """Fill representative/retained_variants on each cluster, in place."""
    out = []
    for c in clusters:
        choice = select_representative(c, images)
        c.representative = choice.representative
        c.retained_variants = choice.retained_variants
        out.append(c)
    return out


def dedup_outcome_reasons(clusters: Iterable[Cluster]) -> dict[str, tuple[str, str]]:
    """Per-image (verdict, reason) for the Deduplication funnel stage."""
    from .extractor import VERDICT_PASS, VERDICT_REMOVED

    result: dict[str, tuple[str, str]] = {}
    for c in clusters:
        for member in c.members:
            if member == c.representative:
                result[member] = (VERDICT_PASS, "cluster representative")
            elif member in c.retained_variants:
                result[member] = (VERDICT_PASS, "retained cross-version variant")
            else:
                result[member] = (VERDICT_REMOVED, f"duplicate of {c.representative}")
    return result


def write_clusters(clusters: Iterable[Cluster], path: Path | str) -> None:
    """Cluster report as line-delimited JSON."""
    lines = []
    for i, c in enumerate(clusters):
        lines.append(
            json.dumps(
                {
                    "cluster_id": i,
                    "members": c.members,
                    "representative": c.representative,
                    "retained_variants": c.retained_variants,
                    "evidence": [[a, b, s] for a, b, s in c.pairwise_evidence],
                },
                separators=(",", ":"),
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
