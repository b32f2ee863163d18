"""Artifact catalog: miner-model inventory and collected-file metadata.

Every collected file becomes an ArtifactRecord with a structured identity
(manufacturer / family / generation) inferred from its filename and any
embedded metadata, plus a functional class (update package, flash image,
management tool, documentation, other). Records are keyed by content hash,
so byte-identical files collapse into one record.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

from . import MinerforgeError

log = logging.getLogger(__name__)

UNKNOWN = "unknown"

# Closed vendor table; configurable by passing a different alias mapping.
VENDOR_OTHER = "Other"
DEFAULT_VENDORS = ("Bitmain", "MicroBT", "Canaan", "Iceriver", VENDOR_OTHER)

# alias token -> canonical vendor. Longest alias wins on conflicts.
DEFAULT_VENDOR_ALIASES: dict[str, str] = {
    "bitmain": "Bitmain",
    "antminer": "Bitmain",
    "microbt": "MicroBT",
    "whatsminer": "MicroBT",
    "canaan": "Canaan",
    "avalon": "Canaan",
    "avalonminer": "Canaan",
    "iceriver": "Iceriver",
}

ARTIFACT_CLASSES = (
    "UpdatePackage",
    "FlashImage",
    "ManagementTool",
    "Documentation",
    "Other",
)

# Extensions that mark a container as an update payload rather than a
# flashable image. Extensions lie more often than magics, so magic rules
# run first and extensions only refine or provide a fallback.
UPDATE_EXTENSIONS = (".bmu", ".aup", ".ota", ".upg", ".upgrade")
FLASH_EXTENSIONS = (".img", ".bin", ".rom", ".fw", ".iso")
TOOL_EXTENSIONS = (".exe", ".msi", ".apk", ".dmg", ".deb", ".rpm", ".appimage")

_CONTAINER_MAGICS = (
    b"\x1f\x8b",        # gzip
    b"PK\x03\x04",      # zip
    b"hsqs",            # squashfs LE
    b"sqsh",            # squashfs BE
    b"UBI#",            # ubi
    b"070701",          # cpio newc
    b"070702",          # cpio crc
)

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")
# Device-model tokens look like "s19xp", "ks5", "m30s": short letter prefix,
# digits, optional alphanumeric tail.
_MODEL_TOKEN = re.compile(r"^[a-z]{1,3}\d{1,4}[a-z0-9]*$")

# Version-like patterns tried in priority order over the raw filename;
# leftmost match of the highest-priority pattern wins.
_GENERATION_PATTERNS = (
    re.compile(r"[A-Za-z]{1,4}-?\d+(?:\.\d+)+"),   # FR-1.27, v1.2.3
    re.compile(r"\d+(?:\.\d+)+"),                  # 4.11.1
    re.compile(r"(?<!\d)\d{8,12}(?!\d)"),          # 2025111202 release stamps
    re.compile(r"\d+(?:-\d+)+"),                   # 2025-11-19
)

CATALOG_KEYS = (
    "artifact_id",
    "content_hash",
    "size_bytes",
    "manufacturer",
    "family",
    "generation",
    "artifact_class",
    "source_paths",
)

_METADATA_VENDOR_KEYS = ("manufacturer", "vendor", "brand")
_METADATA_FAMILY_KEYS = ("family", "model", "miner_family")
_METADATA_GENERATION_KEYS = ("generation", "version", "firmware_version")


class CatalogError(MinerforgeError):
    """Malformed inventory/catalog input."""


class Identity(NamedTuple):
    manufacturer: str
    family: str
    generation: str


@dataclass(frozen=True)
class MinerModel:
    manufacturer: str
    model_name: str
    family: str = UNKNOWN
    release_year: int | None = None


@dataclass
class Inventory:
    """Model inventory with per-vendor counts kept in sync."""

    models: list[MinerModel] = field(default_factory=list)

    @property
    def per_vendor_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for m in self.models:
            counts[m.manufacturer] = counts.get(m.manufacturer, 0) + 1
        return counts

    def __len__(self) -> int:
        return len(self.models)


@dataclass
class ArtifactRecord:
    """One distinct collected file. artifact_id is derived from content_hash
    only, so two byte-identical files share a record."""

    artifact_id: str
    content_hash: str
    size_bytes: int
    manufacturer: str = VENDOR_OTHER
    family: str = UNKNOWN
    generation: str = UNKNOWN
    artifact_class: str = "Other"
    source_paths: list[str] = field(default_factory=list)

    @property
    def source_path(self) -> str:
        return self.source_paths[0] if self.source_paths else ""

    def to_json_obj(self) -> dict:
        return {
            "artifact_id": self.artifact_id,
            "content_hash": self.content_hash,
            "size_bytes": self.size_bytes,
            "manufacturer": self.manufacturer,
            "family": self.family,
            "generation": self.generation,
            "artifact_class": self.artifact_class,
            "source_paths": list(self.source_paths),
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "ArtifactRecord":
        try:
            return cls(
                artifact_id=obj["artifact_id"],
                content_hash=obj["content_hash"],
                size_bytes=int(obj["size_bytes"]),
                manufacturer=obj["manufacturer"],
                family=obj["family"],
                generation=obj["generation"],
                artifact_class=obj["artifact_class"],
                source_paths=list(obj["source_paths"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CatalogError(f"malformed catalog record: {exc}") from exc


def artifact_id_for(content_hash: str) -> str:
    """Short stable key: first 16 hex chars of the content digest."""
    return content_hash[:16]


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_file(path: Path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        while True:
            chunk = fh.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Identity inference


def _tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def _vendor_from_tokens(tokens: list[str], aliases: Mapping[str, str]) -> str:
    """Longest-match lookup of vendor aliases against filename tokens."""
    best = ""
    vendor = VENDOR_OTHER
    for token in tokens:
        for alias, name in aliases.items():
            if (token == alias or token.startswith(alias)) and len(alias) > len(best):
                best = alias
                vendor = name
    return vendor


def _family_from_tokens(tokens: list[str], aliases: Mapping[str, str]) -> str:
    # Family-style aliases ("avalon") name the device line directly; the
    # following token usually carries the series number ("15xHY" -> 15).
    for i, token in enumerate(tokens):
        if token.startswith("avalon"):
            label = "Avalon"
            if i + 1 < len(tokens):
                digits = re.match(r"\d+", tokens[i + 1])
                if digits:
                    return f"{label} {digits.group(0)}"
            suffix = re.search(r"\d+", token)
            return f"{label} {suffix.group(0)}" if suffix else label
    for token in tokens:
        if token in aliases:
            continue
        if _MODEL_TOKEN.match(token):
            return token.upper()
    return UNKNOWN


def _generation_from_name(filename: str) -> str:
    for pattern in _GENERATION_PATTERNS:
        m = pattern.search(filename)
        if m:
            return m.group(0).upper()
    return UNKNOWN


def _metadata_lookup(metadata: Mapping[str, str], keys: Iterable[str]) -> str | None:
    lowered = {k.lower(): v for k, v in metadata.items()}
    for key in keys:
        value = lowered.get(key)
        if value:
            return str(value)
    return None


def infer_identity(
    filename: str,
    embedded_metadata: Mapping[str, str] | None = None,
    vendor_hints: Mapping[str, str] | None = None,
) -> Identity:
    """Infer (manufacturer, family, generation) from a filename.

    Total function: unresolved fields come back as "unknown" (manufacturer
    falls back to the catch-all vendor). Tokenization is lowercase on
    non-alphanumeric boundaries, so the result is case-insensitive.
    Embedded metadata, when present, wins over filename inference; the
    disagreement is logged.
    """
    if not filename:
        raise ValueError("filename must be non-empty")
    aliases = dict(vendor_hints) if vendor_hints else DEFAULT_VENDOR_ALIASES
    tokens = _tokenize(filename)

    manufacturer = _vendor_from_tokens(tokens, aliases)
    family = _family_from_tokens(tokens, aliases)
    generation = _generation_from_name(filename)

    if embedded_metadata:
        meta_vendor = _metadata_lookup(embedded_metadata, _METADATA_VENDOR_KEYS)
        if meta_vendor:
            meta_vendor = _vendor_from_tokens(_tokenize(meta_vendor), aliases)
            if manufacturer not in (VENDOR_OTHER, meta_vendor):
                log.warning(
                    "identity conflict for %r: filename says %s, metadata says %s; keeping metadata",
                    filename, manufacturer, meta_vendor,
                )
            manufacturer = meta_vendor
        meta_family = _metadata_lookup(embedded_metadata, _METADATA_FAMILY_KEYS)
        if meta_family:
            if family not in (UNKNOWN, meta_family):
                log.warning(
                    "identity conflict for %r: filename family %s vs metadata %s; keeping metadata",
                    filename, family, meta_family,
                )
            family = meta_family
        meta_generation = _metadata_lookup(embedded_metadata, _METADATA_GENERATION_KEYS)
        if meta_generation:
            generation = meta_generation.upper()

    return Identity(manufacturer, family, generation)


# ---------------------------------------------------------------------------
# Functional classification


def classify_artifact(record_bytes: bytes, filename: str) -> str:
    """Classify a file by ordered rules: magic bytes, then extension, then
    the Other fallback. Deterministic and total."""
    name = filename.lower()
    if name.endswith(".enc"):  # encryption wrapper is transparent to class
        name = name[:-4]
    head = record_bytes[:8]

    if head.startswith(b"%PDF-"):
        return "Documentation"
    if any(head.startswith(magic) for magic in _CONTAINER_MAGICS) or _looks_like_tar(record_bytes):
        if name.endswith(UPDATE_EXTENSIONS):
            return "UpdatePackage"
        return "FlashImage"

    if name.endswith(".pdf"):
        return "Documentation"
    if name.endswith(UPDATE_EXTENSIONS):
        return "UpdatePackage"
    if name.endswith(FLASH_EXTENSIONS):
        return "FlashImage"
    if name.endswith(TOOL_EXTENSIONS):
        return "ManagementTool"
    return "Other"


def _looks_like_tar(data: bytes) -> bool:
    return len(data) >= 262 and data[257:262] == b"ustar"


# ---------------------------------------------------------------------------
# Directory ingest


def ingest_directory(
    root: Path | str,
    vendor_hints: Mapping[str, str] | None = None,
    jobs: int = 1,
) -> list[ArtifactRecord]:
    """Walk `root` and build one record per distinct file content.

    Files are hashed (optionally in parallel), grouped by digest, classified
    and identity-inferred. Output is canonically ordered by artifact_id, so
    results do not depend on `jobs`. Unreadable individual files are skipped
    with a diagnostic; an unreadable root is fatal.
    """
    root = Path(root)
    if not root.is_dir():
        raise CatalogError(f"ingest root does not exist or is not a directory: {root}")

    paths = sorted(p for p in root.rglob("*") if p.is_file() and not p.is_symlink())

    def _hash_one(path: Path) -> tuple[Path, str] | None:
        try:
            return path, hash_file(path)
        except OSError as exc:
            log.warning("skipping unreadable file %s: %s", path, exc)
            return None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            hashed = [r for r in pool.map(_hash_one, paths) if r is not None]
    else:
        hashed = [r for r in map(_hash_one, paths) if r is not None]

    by_digest: dict[str, list[Path]] = {}
    for path, digest in hashed:
        by_digest.setdefault(digest, []).append(path)

    records = []
    for digest, group in by_digest.items():
        group = sorted(group, key=lambda p: p.relative_to(root).as_posix())
        primary = group[0]
        try:
            with primary.open("rb") as fh:
                head = fh.read(1 << 20)  # magics live near the front
        except OSError as exc:  # raced removal; drop the group
            log.warning("skipping unreadable file %s: %s", primary, exc)
            continue
        identity = infer_identity(primary.name, None, vendor_hints)
        records.append(
            ArtifactRecord(
                artifact_id=artifact_id_for(digest),
                content_hash=digest,
                size_bytes=primary.stat().st_size,
                manufacturer=identity.manufacturer,
                family=identity.family,
                generation=identity.generation,
                artifact_class=classify_artifact(head, primary.name),
                source_paths=[p.relative_to(root).as_posix() for p in group],
            )
        )
    records.sort(key=lambda r: r.artifact_id)
    return records


# ---------------------------------------------------------------------------
# Persistence


def write_catalog(records: Iterable[ArtifactRecord], path: Path | str) -> None:
    """Write records as line-delimited JSON with fixed key order."""
    path = Path(path)
    lines = [
        json.dumps(r.to_json_obj(), separators=(",", ":")) for r in records
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_catalog(path: Path | str) -> list[ArtifactRecord]:
    records = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CatalogError(f"catalog line {i}: invalid JSON ({exc})") from exc
        records.append(ArtifactRecord.from_json_obj(obj))
    return records


def load_inventory(path: Path | str, vendors: Iterable[str] = DEFAULT_VENDORS) -> Inventory:
    """Load a model inventory from CSV (manufacturer,model_name,family,release_year).

    A header row matching the column names is skipped. Manufacturers must be
    in the closed vendor table; duplicate (manufacturer, model_name) pairs
    are rejected.
    """
    vendor_set = set(vendors)
    models: list[MinerModel] = []
    seen: set[tuple[str, str]] = set()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh), 1):
            if not row or not any(cell.strip() for cell in row):
                continue
            cells = [c.strip() for c in row]
            if i == 1 and cells[0].lower() == "manufacturer":
                continue
            if len(cells) < 2:
                raise CatalogError(f"inventory line {i}: need at least manufacturer,model_name")
            manufacturer, model_name = cells[0], cells[1]
            if manufacturer not in vendor_set:
                raise CatalogError(
                    f"inventory line {i}: unknown manufacturer {manufacturer!r}"
                )
            key = (manufacturer, model_name)
            if key in seen:
                raise CatalogError(f"inventory line {i}: duplicate model {key}")
            seen.add(key)
            family = cells[2] if len(cells) > 2 and cells[2] else UNKNOWN
            year: int | None = None
            if len(cells) > 3 and cells[3]:
                try:
                    year = int(cells[3])
                except ValueError as exc:
                    raise CatalogError(f"inventory line {i}: bad release_year {cells[3]!r}") from exc
            models.append(MinerModel(manufacturer, model_name, family, year))
    return Inventory(models=models)
