"""Per-artifact reduction stages: integrity, decryption, reconstruction.

Artifacts flow through a fixed stage chain. Every artifact entering a stage
receives exactly one StageOutcome (Pass or Removed) for that stage, which is
what the funnel report later aggregates. Unpacking peels nested container
layers (gzip/tar/zip/cpio) under hard guards against archive bombs;
squashfs/ubi payloads are detected and delegated to an external handler
hook. Decryption happens through plugins carrying externally supplied key
material; no keys live in this repository and plugins fail closed.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import shutil
import stat
import struct
import tarfile
import zipfile
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

from . import MinerforgeError
from .catalog import ArtifactRecord

log = logging.getLogger(__name__)

STAGE_INTEGRITY = "Integrity"
STAGE_DECRYPTION = "Decryption"
STAGE_RECONSTRUCTION = "Reconstruction"
STAGE_DEDUPLICATION = "Deduplication"
STAGES = (STAGE_INTEGRITY, STAGE_DECRYPTION, STAGE_RECONSTRUCTION, STAGE_DEDUPLICATION)

VERDICT_PASS = "Pass"
VERDICT_REMOVED = "Removed"

COMPLETENESS_FULL = "Full"
COMPLETENESS_PARTIAL = "Partial"

# Canonical system directories that anchor a reconstructed root filesystem.
SYSTEM_DIRS = ("etc", "bin", "sbin", "usr")

CONFIG_SUFFIXES = (".conf", ".cfg", ".ini", ".config")

ENTROPY_WINDOW = 4096
ENTROPY_THRESHOLD = 7.5
ENTROPY_MIN_FRACTION = 0.9

_MAGIC_SCAN_LIMIT = 1 << 20  # magics searched within the first 1 MiB
_MAGIC_ALIGNMENT = 4


class ExtractionError(MinerforgeError):
    """Unrecoverable extractor failure (not a stage verdict)."""


class DecryptionError(ExtractionError):
    """Plugin could not decrypt (wrong/missing key, corrupt ciphertext)."""


class _GuardExceeded(Exception):
    def __init__(self, reason: str) -> None:
        self.reason = reason


@dataclass(frozen=True)
class StageOutcome:
    stage: str
    artifact_id: str
    verdict: str
    reason: str

    def to_json_obj(self) -> dict:
        return {
            "stage": self.stage,
            "artifact_id": self.artifact_id,
            "verdict": self.verdict,
            "reason": self.reason,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "StageOutcome":
        return cls(obj["stage"], obj["artifact_id"], obj["verdict"], obj["reason"])


@dataclass
class FirmwareImage:
    """A reconstructed filesystem tree extracted from one artifact."""

    image_id: str
    artifact_id: str
    root: Path
    completeness: str = COMPLETENESS_PARTIAL
    encrypted_regions: list[tuple[str, float]] = field(default_factory=list)
    unpack_depth_used: int = 0

    def iter_files(self) -> list[Path]:
        return sorted(
            p for p in self.root.rglob("*") if p.is_file() and not p.is_symlink()
        )


@dataclass
class ExtractionLimits:
    """Archive-bomb guards applied across the whole peel chain."""

    max_depth: int = 8
    max_expansion_ratio: float = 100.0
    max_total_bytes: int = 4 << 30


class ContainerHit(NamedTuple):
    kind: str
    offset: int


class CompletenessVerdict(NamedTuple):
    completeness: str
    evidence: list[str]


# ---------------------------------------------------------------------------
# Entropy


def shannon_entropy(window: bytes) -> float:
    """Shannon entropy of a byte window in bits/byte, in [0, 8]."""
    if not window:
        raise ValueError("entropy window must be non-empty")
    total = len(window)
    acc = 0.0
    for count in Counter(window).values():
        p = count / total
        acc -= p * math.log2(p)
    return acc


def find_encrypted_regions(
    root: Path,
    window: int = ENTROPY_WINDOW,
    threshold: float = ENTROPY_THRESHOLD,
    min_fraction: float = ENTROPY_MIN_FRACTION,
) -> list[tuple[str, float]]:
    """Flag files whose windowed entropy marks them as likely ciphertext.

    A file is flagged when at least `min_fraction` of its full windows reach
    `threshold` bits/byte. Files shorter than one window are skipped.
    """
    flagged: list[tuple[str, float]] = []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.is_symlink():
            continue
        data = path.read_bytes()
        n_windows = len(data) // window
        if n_windows == 0:
            continue
        entropies = [
            shannon_entropy(data[i * window:(i + 1) * window]) for i in range(n_windows)
        ]
        high = sum(1 for e in entropies if e >= threshold)
        if high / n_windows >= min_fraction:
            flagged.append(
                (path.relative_to(root).as_posix(), round(sum(entropies) / n_windows, 4))
            )
    return flagged


# ---------------------------------------------------------------------------
# Container detection

_PLAIN_MAGICS = (
    ("gzip", b"\x1f\x8b"),
    ("zip", b"PK\x03\x04"),
    ("cpio-newc", b"070701"),
    ("cpio-newc", b"070702"),
    ("squashfs", b"hsqs"),
    ("squashfs", b"sqsh"),
    ("ubi", b"UBI#"),
)


def detect_container(data: bytes) -> ContainerHit:
    """First container magic at any 4-byte-aligned offset in the first 1 MiB.

    Returns ("unknown", -1) when nothing matches. tar is recognized by its
    "ustar" marker 257 bytes into the candidate header block.
    """
    limit = min(len(data), _MAGIC_SCAN_LIMIT)
    for offset in range(0, limit, _MAGIC_ALIGNMENT):
        for kind, magic in _PLAIN_MAGICS:
            if data.startswith(magic, offset):
                return ContainerHit(kind, offset)
        if data[offset + 257:offset + 262] == b"ustar":
            return ContainerHit("tar", offset)
    return ContainerHit("unknown", -1)


# ---------------------------------------------------------------------------
# Integrity validation


def validate_integrity(record: ArtifactRecord, data: bytes) -> StageOutcome:
    """Integrity/format verdict for one artifact. Never raises on content."""

    def removed(reason: str) -> StageOutcome:
        return StageOutcome(STAGE_INTEGRITY, record.artifact_id, VERDICT_REMOVED, reason)

    def passed(reason: str) -> StageOutcome:
        return StageOutcome(STAGE_INTEGRITY, record.artifact_id, VERDICT_PASS, reason)

    if len(data) == 0:
        return removed("empty")

    hit = detect_container(data)
    if hit.offset != 0:
        if hit.kind == "unknown":
            return passed("no container magic")
        return passed(f"embedded {hit.kind} container at offset {hit.offset}")

    if hit.kind == "gzip":
        d = zlib.decompressobj(16 + zlib.MAX_WBITS)
        buf = data
        try:
            while buf and not d.eof:
                d.decompress(buf, 1 << 20)
                buf = d.unconsumed_tail
        except zlib.error:
            return removed("invalid container")
        if not d.eof:
            return removed("truncated container")
        return passed("gzip container valid")
    if hit.kind == "zip":
        try:
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                bad = zf.testzip()
            if bad is not None:
                return removed("archive self-check failed")
        except zipfile.BadZipFile:
            return removed("truncated container")
        return passed("zip container valid")
    if hit.kind == "tar":
        try:
            with tarfile.open(fileobj=io.BytesIO(data)) as tf:
                tf.getmembers()
        except tarfile.TarError:
            return removed("truncated container")
        return passed("tar container valid")
    if hit.kind == "cpio-newc":
        try:
            for _ in _iter_cpio_members(data):
                pass
        except ValueError:
            return removed("truncated container")
        return passed("cpio container valid")
    # squashfs/ubi carry no cheap self-check we can run here
    return passed(f"{hit.kind} container not self-checking")


# ---------------------------------------------------------------------------
# Decryptor plugins


@dataclass
class DecryptorPlugin:
    """Base decryptor. Key material is always supplied from outside the
    repository (environment or key file); a plugin without keys fails closed."""

    plugin_id: str
    cipher_family: str
    key_material: bytes | None = None

    def applicable_when(self, data: bytes, name: str) -> bool:
        raise NotImplementedError

    def decrypt(self, data: bytes) -> bytes:
        raise NotImplementedError


class CbcDecryptorPlugin(DecryptorPlugin):
    """AES-256-CBC container with a fixed 8-byte header.

    Mirrors the static-secret update-container scheme seen in the wild:
    one hardcoded key+IV per vendor, supplied here as 48 bytes of external
    key material (32-byte key || 16-byte IV), PKCS7 padding.
    """

    MAGIC = b"ENCFW01\n"
    EXTENSION = ".enc"

    def __init__(self, plugin_id: str = "ref-cbc", key_material: bytes | None = None):
        super().__init__(plugin_id=plugin_id, cipher_family="aes-256-cbc", key_material=key_material)

    def applicable_when(self, data: bytes, name: str) -> bool:
        return name.lower().endswith(self.EXTENSION) or data.startswith(self.MAGIC)

    def decrypt(self, data: bytes) -> bytes:
        if self.key_material is None:
            raise DecryptionError(f"plugin {self.plugin_id}: key material absent")
        if len(self.key_material) != 48:
            raise DecryptionError(f"plugin {self.plugin_id}: key material must be 48 bytes")
        from cryptography.hazmat.primitives import padding
        from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

        body = data[len(self.MAGIC):] if data.startswith(self.MAGIC) else data
        key, iv = self.key_material[:32], self.key_material[32:]
        try:
            decryptor = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
            padded = decryptor.update(body) + decryptor.finalize()
            unpadder = padding.PKCS7(128).unpadder()
            return unpadder.update(padded) + unpadder.finalize()
        except Exception as exc:
            raise DecryptionError(f"plugin {self.plugin_id}: decryption failed ({exc})") from exc


def load_key_material(plugin_id: str, key_file: Path | str | None = None) -> bytes | None:
    """Resolve key material from MINERFORGE_KEY_<ID> or a JSON key file.

    The key file maps plugin_id to a hex string. Returns None when neither
    source provides a key (the plugin then fails closed).
    """
    env_name = "MINERFORGE_KEY_" + "".join(
        c if c.isalnum() else "_" for c in plugin_id.upper()
    )
    raw = os.environ.get(env_name)
    if raw:
        return bytes.fromhex(raw)
    if key_file is not None:
        path = Path(key_file)
        if path.exists():
            table = json.loads(path.read_text(encoding="utf-8"))
            value = table.get(plugin_id)
            if value:
                return bytes.fromhex(value)
    return None


# ---------------------------------------------------------------------------
# Guarded extraction helpers


class _Budget:
    def __init__(self, original_size: int, limits: ExtractionLimits) -> None:
        self._cap = min(
            limits.max_total_bytes,
            int(max(original_size, 1) * limits.max_expansion_ratio),
        )
        self.consumed = 0

    def charge(self, n: int) -> None:
        self.consumed += n
        if self.consumed > self._cap:
            raise _GuardExceeded("expansion guard")


def _safe_dest(root: Path, name: str) -> Path | None:
    """Resolve an archive member name inside root; None when it escapes."""
    name = name.lstrip("/")
    parts = [p for p in name.split("/") if p not in ("", ".")]
    if any(p == ".." for p in parts):
        return None
    if not parts:
        return None
    return root.joinpath(*parts)


def _gunzip(data: bytes, budget: _Budget) -> bytes:
    """Decompress a gzip stream, charging the budget per output chunk so a
    bomb trips the guard before the full payload materializes."""
    out = io.BytesIO()
    d = zlib.decompressobj(16 + zlib.MAX_WBITS)
    buf = data
    try:
        while buf and not d.eof:
            chunk = d.decompress(buf, 1 << 20)
            budget.charge(len(chunk))
            out.write(chunk)
            buf = d.unconsumed_tail
        if not d.eof:
            raise ExtractionError("gzip stream truncated")
    except zlib.error as exc:
        raise ExtractionError(f"gzip stream invalid: {exc}") from exc
    return out.getvalue()


def _extract_tar(data: bytes, dest: Path, budget: _Budget) -> None:
    try:
        _extract_tar_members(data, dest, budget)
    except tarfile.TarError as exc:
        raise ExtractionError(f"tar stream invalid: {exc}") from exc


def _extract_tar_members(data: bytes, dest: Path, budget: _Budget) -> None:
    with tarfile.open(fileobj=io.BytesIO(data)) as tf:
        for member in tf.getmembers():
            target = _safe_dest(dest, member.name)
            if target is None:
                log.warning("tar member escapes root, skipped: %s", member.name)
                continue
            if member.isdir():
                target.mkdir(parents=True, exist_ok=True)
            elif member.isfile():
                budget.charge(member.size)
                target.parent.mkdir(parents=True, exist_ok=True)
                src = tf.extractfile(member)
                assert src is not None
                target.write_bytes(src.read())
                target.chmod((member.mode & 0o777) | stat.S_IRUSR | stat.S_IWUSR)
            else:
                # links/devices are not materialized from untrusted archives
                log.warning("tar member type skipped: %s", member.name)


def _extract_zip(data: bytes, dest: Path, budget: _Budget) -> None:
    try:
        _extract_zip_members(data, dest, budget)
    except (zipfile.BadZipFile, zlib.error) as exc:
        raise ExtractionError(f"zip stream invalid: {exc}") from exc


def _extract_zip_members(data: bytes, dest: Path, budget: _Budget) -> None:
    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        for info in zf.infolist():
            target = _safe_dest(dest, info.filename)
            if target is None:
                log.warning("zip member escapes root, skipped: %s", info.filename)
                continue
            if info.is_dir():
                target.mkdir(parents=True, exist_ok=True)
                continue
            budget.charge(info.file_size)
            target.parent.mkdir(parents=True, exist_ok=True)
            with zf.open(info) as src:
                target.write_bytes(src.read())
            mode = (info.external_attr >> 16) & 0o777
            if mode & 0o111:
                target.chmod(mode | stat.S_IRUSR | stat.S_IWUSR)


_CPIO_HEADER = struct.Struct("6s" + "8s" * 13)


def _iter_cpio_members(data: bytes):
    """Yield (name, mode, body) from a newc cpio stream. Raises ValueError
    on malformed/truncated input."""
    pos = 0

    def _align(n: int) -> int:
        return (n + 3) & ~3

    while True:
        if pos + 110 > len(data):
            raise ValueError("cpio header truncated")
        fields = _CPIO_HEADER.unpack_from(data, pos)
        magic = fields[0]
        if magic not in (b"070701", b"070702"):
            raise ValueError(f"bad cpio magic at {pos}")
        try:
            mode = int(fields[2], 16)
            filesize = int(fields[7], 16)
            namesize = int(fields[12], 16)
        except ValueError as exc:
            raise ValueError(f"bad cpio header field at {pos}") from exc
        name_start = pos + 110
        name_end = name_start + namesize
        if name_end > len(data):
            raise ValueError("cpio name truncated")
        name = data[name_start:name_end - 1].decode("utf-8", "replace")
        body_start = _align(name_end)
        body_end = body_start + filesize
        if body_end > len(data):
            raise ValueError("cpio body truncated")
        if name == "TRAILER!!!":
            return
        yield name, mode, data[body_start:body_end]
        pos = _align(body_end)


def _extract_cpio(data: bytes, dest: Path, budget: _Budget) -> None:
    try:
        for name, mode, body in _iter_cpio_members(data):
            target = _safe_dest(dest, name)
            if target is None:
                log.warning("cpio member escapes root, skipped: %s", name)
                continue
            if stat.S_ISDIR(mode):
                target.mkdir(parents=True, exist_ok=True)
            elif stat.S_ISREG(mode):
                budget.charge(len(body))
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(body)
                if mode & 0o111:
                    target.chmod((mode & 0o777) | stat.S_IRUSR | stat.S_IWUSR)
            else:
                log.warning("cpio member type skipped: %s", name)
    except ValueError as exc:
        raise ExtractionError(f"cpio stream invalid: {exc}") from exc


# ---------------------------------------------------------------------------
# Unpack

FsHandler = Callable[[str, bytes, Path], bool]


class UnpackResult(NamedTuple):
    image: FirmwareImage | None
    outcomes: list[StageOutcome]


def _clear_tree(path: Path) -> None:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)


def unpack(
    record: ArtifactRecord,
    data: bytes,
    out_dir: Path | str,
    plugins: Sequence[DecryptorPlugin] = (),
    limits: ExtractionLimits | None = None,
    fs_handler: FsHandler | None = None,
) -> UnpackResult:
    """Recursively extract one integrity-validated artifact.

    Container layers are peeled while the payload is a single blob; a
    multi-file tree is the final root filesystem. An extracted tree made of
    exactly one file that is itself a container is unwrapped further (the
    usual update.tar.gz -> rootfs.tar nesting). Produces Decryption and
    Reconstruction stage outcomes; on any Removed verdict no image is kept.
    """
    limits = limits or ExtractionLimits()
    out_dir = Path(out_dir)
    image_id = record.artifact_id
    root = out_dir / image_id / "root"
    budget = _Budget(len(data), limits)

    def _removed(stage: str, reason: str, prior: list[StageOutcome]) -> UnpackResult:
        shutil.rmtree(out_dir / image_id, ignore_errors=True)
        return UnpackResult(None, prior + [StageOutcome(stage, record.artifact_id, VERDICT_REMOVED, reason)])

    current = data
    current_name = Path(record.source_path).name or record.artifact_id
    decrypted_with: list[str] = []
    depth_used = 0
    outcomes: list[StageOutcome] = []
    _clear_tree(root)

    while True:
        plugin = next(
            (p for p in plugins if p.applicable_when(current, current_name)), None
        )
        if plugin is not None:
            if plugin.key_material is None:
                return _removed(STAGE_DECRYPTION, "missing key material", [])
            try:
                current = plugin.decrypt(current)
            except DecryptionError as exc:
                log.warning("artifact %s: %s", record.artifact_id, exc)
                return _removed(STAGE_DECRYPTION, "decryption failed", [])
            decrypted_with.append(plugin.plugin_id)
            if current_name.lower().endswith(CbcDecryptorPlugin.EXTENSION):
                current_name = current_name[: -len(CbcDecryptorPlugin.EXTENSION)]

        decryption_outcome = StageOutcome(
            STAGE_DECRYPTION,
            record.artifact_id,
            VERDICT_PASS,
            ("decrypted via " + ",".join(decrypted_with)) if decrypted_with else "no encryption detected",
        )

        depth_used += 1
        if depth_used > limits.max_depth:
            return _removed(STAGE_RECONSTRUCTION, "depth guard", [decryption_outcome])

        kind, offset = detect_container(current)
        payload = current[offset:] if offset > 0 else current

        try:
            if kind == "unknown":
                return _removed(STAGE_RECONSTRUCTION, "no recognizable container", [decryption_outcome])
            if kind in ("squashfs", "ubi"):
                if fs_handler is None:
                    return _removed(STAGE_RECONSTRUCTION, "unsupported filesystem", [decryption_outcome])
                if not fs_handler(kind, payload, root):
                    return _removed(STAGE_RECONSTRUCTION, f"{kind} handler failed", [decryption_outcome])
                break
            if kind == "gzip":
                current = _gunzip(payload, budget)
                if current_name.lower().endswith(".gz"):
                    current_name = current_name[:-3]
                elif current_name.lower().endswith((".tgz",)):
                    current_name = current_name[:-4] + ".tar"
                continue
            if kind == "tar":
                _extract_tar(payload, root, budget)
            elif kind == "zip":
                _extract_zip(payload, root, budget)
            elif kind == "cpio-newc":
                _extract_cpio(payload, root, budget)
        except _GuardExceeded as exc:
            return _removed(STAGE_RECONSTRUCTION, exc.reason, [decryption_outcome])
        except ExtractionError as exc:
            log.warning("artifact %s: %s", record.artifact_id, exc)
            return _removed(STAGE_RECONSTRUCTION, "extraction failed", [decryption_outcome])

        files = [p for p in root.rglob("*") if p.is_file() and not p.is_symlink()]
        if not files:
            return _removed(STAGE_RECONSTRUCTION, "empty extraction", [decryption_outcome])
        if len(files) == 1 and depth_used < limits.max_depth:
            inner = files[0].read_bytes()
            if detect_container(inner).kind != "unknown":
                current = inner
                current_name = files[0].name
                _clear_tree(root)
                continue
        break

    image = FirmwareImage(
        image_id=image_id,
        artifact_id=record.artifact_id,
        root=root,
        unpack_depth_used=depth_used,
    )
    verdict = reconstruct_rootfs(image)
    image.completeness = verdict.completeness
    image.encrypted_regions = find_encrypted_regions(root)
    outcomes = [
        decryption_outcome,
        StageOutcome(
            STAGE_RECONSTRUCTION,
            record.artifact_id,
            VERDICT_PASS,
            f"{verdict.completeness} tree, {len(image.iter_files())} files",
        ),
    ]
    return UnpackResult(image, outcomes)


# ---------------------------------------------------------------------------
# Completeness


def _is_executable(path: Path) -> bool:
    if path.stat().st_mode & 0o111:
        return True
    try:
        with path.open("rb") as fh:
            head = fh.read(4)
    except OSError:
        return False
    return head.startswith(b"\x7fELF") or head.startswith(b"#!")


def _is_config(root: Path, path: Path) -> bool:
    rel = path.relative_to(root)
    if rel.parts and rel.parts[0] == "etc":
        return True
    return path.suffix.lower() in CONFIG_SUFFIXES or path.name.lower() == "config"


def reconstruct_rootfs(image: FirmwareImage) -> CompletenessVerdict:
    """Completeness verdict: Full needs a canonical system directory, an
    executable, and a configuration file; Partial otherwise. Evidence lists
    the matching paths per criterion."""
    root = image.root
    evidence: list[str] = []

    sys_dirs = [d for d in SYSTEM_DIRS if (root / d).is_dir()]
    evidence.extend(f"system-dir:{d}" for d in sys_dirs)

    executables: list[str] = []
    configs: list[str] = []
    for path in image.iter_files():
        rel = path.relative_to(root).as_posix()
        if _is_executable(path):
            executables.append(rel)
        if _is_config(root, path):
            configs.append(rel)
    evidence.extend(f"executable:{p}" for p in executables)
    evidence.extend(f"config:{p}" for p in configs)

    complete = bool(sys_dirs) and bool(executables) and bool(configs)
    return CompletenessVerdict(
        COMPLETENESS_FULL if complete else COMPLETENESS_PARTIAL, evidence
    )


# ---------------------------------------------------------------------------
# Pipeline over a catalog


def save_image_meta(image: FirmwareImage, out_dir: Path | str) -> Path:
    meta = {
        "image_id": image.image_id,
        "artifact_id": image.artifact_id,
        "completeness": image.completeness,
        "encrypted_regions": [[p, e] for p, e in image.encrypted_regions],
        "unpack_depth_used": image.unpack_depth_used,
        "file_count": len(image.iter_files()),
    }
    path = Path(out_dir) / image.image_id / "meta.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_image(image_dir: Path | str) -> FirmwareImage:
    image_dir = Path(image_dir)
    meta = json.loads((image_dir / "meta.json").read_text(encoding="utf-8"))
    return FirmwareImage(
        image_id=meta["image_id"],
        artifact_id=meta["artifact_id"],
        root=image_dir / "root",
        completeness=meta["completeness"],
        encrypted_regions=[(p, e) for p, e in meta["encrypted_regions"]],
        unpack_depth_used=meta["unpack_depth_used"],
    )


def run_reduction(
    records: Iterable[ArtifactRecord],
    data_dir: Path | str,
    out_dir: Path | str,
    plugins: Sequence[DecryptorPlugin] = (),
    limits: ExtractionLimits | None = None,
    fs_handler: FsHandler | None = None,
    jobs: int = 1,
) -> tuple[list[FirmwareImage], list[StageOutcome]]:
    """Run Integrity -> Decryption -> Reconstruction over cataloged artifacts.

    Each record's primary source path is read relative to data_dir. Artifacts
    are independent, so they may be processed in parallel (`jobs`); each
    artifact's stage chain stays sequential and outcomes are canonically
    ordered (stage order, then artifact_id), so results do not depend on the
    worker count.
    """
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def _process(record: ArtifactRecord) -> tuple[FirmwareImage | None, list[StageOutcome]]:
        data = (data_dir / record.source_path).read_bytes()
        integrity = validate_integrity(record, data)
        if integrity.verdict == VERDICT_REMOVED:
            return None, [integrity]
        image, stage_outcomes = unpack(record, data, out_dir, plugins, limits, fs_handler)
        return image, [integrity] + stage_outcomes

    records = list(records)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_process, records))
    else:
        results = [_process(r) for r in records]

    images: list[FirmwareImage] = []
    outcomes: list[StageOutcome] = []
    for image, stage_outcomes in results:
        outcomes.extend(stage_outcomes)
        if image is not None:
            save_image_meta(image, out_dir)
            images.append(image)

    stage_rank = {name: i for i, name in enumerate(STAGES)}
    outcomes.sort(key=lambda o: (stage_rank[o.stage], o.artifact_id))
    images.sort(key=lambda im: im.image_id)
    return images, outcomes


def write_outcomes(outcomes: Iterable[StageOutcome], path: Path | str) -> None:
    lines = [json.dumps(o.to_json_obj(), separators=(",", ":")) for o in outcomes]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_outcomes(path: Path | str) -> list[StageOutcome]:
    return [
        StageOutcome.from_json_obj(json.loads(line))
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
