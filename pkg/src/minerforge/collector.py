"""Artifact acquisition from mirror-style sources.

Three strategies, matching how vendors actually distribute firmware:
crawling static directory indexes (crawl_index), querying structured
catalog/download endpoints (fetch_catalog_endpoint), and snapshotting
version-controlled trees (mirror_repository). All of them produce a
MirrorManifest whose entries are canonically ordered and guaranteed to
stay inside the mirror root. HTTP is GET-only and unauthenticated.
"""

from __future__ import annotations

import fnmatch
import logging
import shutil
import time
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from typing import Iterable, NamedTuple
from urllib.parse import unquote, urldefrag, urljoin, urlsplit

import requests

from . import MinerforgeError
from .catalog import hash_bytes, hash_file

log = logging.getLogger(__name__)

DEFAULT_MAX_DEPTH = 16
DEFAULT_RATE_LIMIT = 4.0  # requests per second, politeness default
DEFAULT_USER_AGENT = "minerforge-collector/0.1"
DEFAULT_TIMEOUT = 30.0

MANIFEST_NAME = "manifest.jsonl"
_VCS_DIRS = {".git", ".hg", ".svn"}


class CollectorError(MinerforgeError):
    pass


@dataclass
class CrawlPlan:
    root_url: str
    max_depth: int = DEFAULT_MAX_DEPTH
    allow_patterns: list[str] = field(default_factory=list)
    rate_limit: float = DEFAULT_RATE_LIMIT
    same_origin: bool = True
    user_agent: str = DEFAULT_USER_AGENT

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise CollectorError("max_depth must be >= 1")
        if self.rate_limit <= 0:
            raise CollectorError("rate_limit must be > 0")
        if not self.root_url.endswith("/"):
            self.root_url += "/"


@dataclass(frozen=True)
class ManifestEntry:
    url: str
    relative_path: str
    size_bytes: int
    content_hash: str

    def to_json_obj(self) -> dict:
        return {
            "url": self.url,
            "relative_path": self.relative_path,
            "size_bytes": self.size_bytes,
            "content_hash": self.content_hash,
        }


@dataclass
class MirrorManifest:
    entries: list[ManifestEntry]
    fetched_at: float = 0.0  # in-memory only; never serialized (byte-stable output)

    def __post_init__(self) -> None:
        paths = [e.relative_path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise CollectorError("manifest relative_path values must be unique")
        for p in paths:
            if p.startswith("/") or ".." in p.split("/"):
                raise CollectorError(f"manifest path escapes the mirror root: {p}")
        self.entries = sorted(self.entries, key=lambda e: e.relative_path)


def write_manifest(manifest: MirrorManifest, path: Path | str) -> None:
    import json

    lines = [json.dumps(e.to_json_obj(), separators=(",", ":")) for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path: Path | str) -> MirrorManifest:
    import json

    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        entries.append(
            ManifestEntry(obj["url"], obj["relative_path"], obj["size_bytes"], obj["content_hash"])
        )
    return MirrorManifest(entries=entries)


@dataclass
class CrawlStats:
    pages_fetched: int = 0
    pages_failed: int = 0
    files_downloaded: int = 0
    files_reused: int = 0
    skipped_depth: int = 0
    skipped_escape: int = 0

    @property
    def requests_total(self) -> int:
        return self.pages_fetched + self.pages_failed + self.files_downloaded


class CrawlResult(NamedTuple):
    manifest: MirrorManifest
    stats: CrawlStats


class _AnchorParser(HTMLParser):
    """Anchor hrefs from a directory-index page; entities are decoded by
    the base parser, no script evaluation happens."""

    def __init__(self) -> None:
        super().__init__()
        self.hrefs: list[str] = []

    def handle_starttag(self, tag: str, attrs) -> None:
        if tag.lower() != "a":
            return
        for name, value in attrs:
            if name.lower() == "href" and value:
                self.hrefs.append(value)


class _RateLimiter:
    def __init__(self, per_second: float) -> None:
        self._interval = 1.0 / per_second
        self._next = 0.0

    def wait(self) -> None:
        now = time.monotonic()
        if now < self._next:
            time.sleep(self._next - now)
        self._next = max(now, self._next) + self._interval


def _allowed(relative_path: str, patterns: list[str]) -> bool:
    if not patterns:
        return True
    name = relative_path.rsplit("/", 1)[-1]
    return any(
        fnmatch.fnmatch(relative_path, pat) or fnmatch.fnmatch(name, pat)
        for pat in patterns
    )


def _safe_relative(root_url: str, file_url: str, mirror_root: Path) -> Path | None:
    """Filesystem target for a crawled URL, or None when it would escape."""
    rel = unquote(file_url[len(root_url):])
    parts = [p for p in rel.split("/") if p not in ("", ".")]
    if not parts or any(p == ".." for p in parts):
        return None
    target = mirror_root.joinpath(*parts)
    try:
        target.resolve().relative_to(mirror_root.resolve())
    except ValueError:
        return None
    return target


def crawl_index(
    plan: CrawlPlan,
    dest: Path | str,
    session: requests.Session | None = None,
) -> CrawlResult:
    """Breadth-first crawl of a static directory index, mirroring matching
    files under `dest` and producing a deterministic manifest.

    Pages are visited at most once (normalized-URL visited set plus the
    depth cap). Files already on disk whose size and hash match the
    previous manifest are not re-downloaded. A failing root fetch is
    fatal; failing inner pages are skipped with a diagnostic.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    session = session or requests.Session()
    session.headers["User-Agent"] = plan.user_agent
    limiter = _RateLimiter(plan.rate_limit)
    stats = CrawlStats()

    previous: dict[str, ManifestEntry] = {}
    manifest_path = dest / MANIFEST_NAME
    if manifest_path.exists():
        previous = {e.relative_path: e for e in read_manifest(manifest_path).entries}

    root_split = urlsplit(plan.root_url)
    limiter.wait()
    try:
        response = session.get(plan.root_url, timeout=DEFAULT_TIMEOUT)
        response.raise_for_status()
    except requests.RequestException as exc:
        raise CollectorError(f"root fetch failed: {plan.root_url}: {exc}") from exc
    stats.pages_fetched += 1

    entries: list[ManifestEntry] = []
    visited = {plan.root_url}
    queue: list[tuple[str, int, str]] = [(plan.root_url, 0, response.text)]

    while queue:
        page_url, depth, html = queue.pop(0)
        parser = _AnchorParser()
        parser.feed(html)
        for href in parser.hrefs:
            if href.startswith("#") or "?" in href:
                continue  # fragments and index sort links
            absolute = urldefrag(urljoin(page_url, href)).url
            split = urlsplit(absolute)
            if split.scheme not in ("http", "https"):
                continue
            if plan.same_origin and (split.scheme, split.netloc) != (
                root_split.scheme,
                root_split.netloc,
            ):
                continue
            if absolute == page_url or not absolute.startswith(plan.root_url):
                continue  # self and parent links stay out of scope
            if absolute.endswith("/"):
                if absolute in visited:
                    continue
                visited.add(absolute)
                if depth + 1 >= plan.max_depth:
                    stats.skipped_depth += 1
                    continue
                limiter.wait()
                try:
                    sub = session.get(absolute, timeout=DEFAULT_TIMEOUT)
                    sub.raise_for_status()
                except requests.RequestException as exc:
                    log.warning("page skipped: %s: %s", absolute, exc)
                    stats.pages_failed += 1
                    continue
                stats.pages_fetched += 1
                queue.append((absolute, depth + 1, sub.text))
                continue

            if absolute in visited:
                continue
            visited.add(absolute)
            target = _safe_relative(plan.root_url, absolute, dest)
            if target is None:
                log.warning("hostile or unusable link skipped: %s", href)
                stats.skipped_escape += 1
                continue
            relative_path = target.relative_to(dest).as_posix()
            if not _allowed(relative_path, plan.allow_patterns):
                continue

            prior = previous.get(relative_path)
            if (
                prior is not None
                and target.is_file()
                and target.stat().st_size == prior.size_bytes
                and hash_file(target) == prior.content_hash
            ):
                entries.append(
                    ManifestEntry(absolute, relative_path, prior.size_bytes, prior.content_hash)
                )
                stats.files_reused += 1
                continue

            limiter.wait()
            try:
                blob = session.get(absolute, timeout=DEFAULT_TIMEOUT)
                blob.raise_for_status()
            except requests.RequestException as exc:
                log.warning("download skipped: %s: %s", absolute, exc)
                continue
            stats.files_downloaded += 1
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(blob.content)
            entries.append(
                ManifestEntry(
                    absolute, relative_path, len(blob.content), hash_bytes(blob.content)
                )
            )

    manifest = MirrorManifest(entries=entries, fetched_at=time.time())
    write_manifest(manifest, manifest_path)
    return CrawlResult(manifest, stats)


class CatalogTarget(NamedTuple):
    name: str
    url: str
    metadata: dict


def fetch_catalog_endpoint(
    endpoint_url: str,
    session: requests.Session | None = None,
    user_agent: str = DEFAULT_USER_AGENT,
) -> list[CatalogTarget]:
    """Query a structured JSON index of downloadable firmware files.

    Accepts either a JSON array of entries or an object with a "files"
    array; each entry needs string "name" and "url" fields, remaining keys
    become metadata. Schema violations are fatal and name the first
    offending entry/field.
    """
    session = session or requests.Session()
    session.headers["User-Agent"] = user_agent
    try:
        response = session.get(endpoint_url, timeout=DEFAULT_TIMEOUT)
        response.raise_for_status()
    except requests.RequestException as exc:
        raise CollectorError(f"endpoint fetch failed: {endpoint_url}: {exc}") from exc
    try:
        payload = response.json()
    except ValueError as exc:
        raise CollectorError(f"endpoint did not return JSON: {endpoint_url}") from exc

    if isinstance(payload, dict):
        if "files" not in payload:
            raise CollectorError("endpoint schema mismatch: missing field 'files'")
        listing = payload["files"]
    else:
        listing = payload
    if not isinstance(listing, list):
        raise CollectorError("endpoint schema mismatch: file listing is not an array")

    targets: list[CatalogTarget] = []
    for i, entry in enumerate(listing):
        if not isinstance(entry, dict):
            raise CollectorError(f"endpoint schema mismatch: entry {i} is not an object")
        for required in ("name", "url"):
            if not isinstance(entry.get(required), str) or not entry[required]:
                raise CollectorError(
                    f"endpoint schema mismatch: entry {i} missing field {required!r}"
                )
        metadata = {k: v for k, v in entry.items() if k not in ("name", "url")}
        targets.append(CatalogTarget(entry["name"], entry["url"], metadata))

    # listing order is preserved by the stable sort's tie-breaking
    targets.sort(key=lambda t: (t.name, t.url))
    return targets


def mirror_repository(source: Path | str, dest: Path | str) -> MirrorManifest:
    """Byte-exact snapshot copy of a version-controlled working tree.

    Local paths (and file:// URLs) are copied directly; http(s) sources
    must point at a tar/tar.gz snapshot, which is safely extracted. VCS
    internals (.git and friends) are not part of the working tree and are
    skipped. Full history preservation is out of scope.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    src_text = str(source)

    if src_text.startswith(("http://", "https://")):
        _snapshot_from_url(src_text, dest)
        source_label = src_text
    else:
        if src_text.startswith("file://"):
            src_text = src_text[len("file://"):]
        src = Path(src_text)
        if not src.is_dir():
            raise CollectorError(f"source not readable or not a directory: {source}")
        for path in sorted(src.rglob("*")):
            rel = path.relative_to(src)
            if any(part in _VCS_DIRS for part in rel.parts):
                continue
            target = dest / rel
            if path.is_dir():
                target.mkdir(parents=True, exist_ok=True)
            elif path.is_file() and not path.is_symlink():
                target.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(path, target)
        source_label = src.as_posix()

    entries = [
        ManifestEntry(
            url=f"{source_label}/{p.relative_to(dest).as_posix()}",
            relative_path=p.relative_to(dest).as_posix(),
            size_bytes=p.stat().st_size,
            content_hash=hash_file(p),
        )
        for p in sorted(dest.rglob("*"))
        if p.is_file() and not p.is_symlink() and p.name != MANIFEST_NAME
    ]
    manifest = MirrorManifest(entries=entries, fetched_at=time.time())
    write_manifest(manifest, dest / MANIFEST_NAME)
    return manifest


def _snapshot_from_url(url: str, dest: Path) -> None:
    from .extractor import ExtractionLimits, _Budget, _extract_tar, _gunzip

    try:
        response = requests.get(url, timeout=DEFAULT_TIMEOUT)
        response.raise_for_status()
    except requests.RequestException as exc:
        raise CollectorError(f"snapshot fetch failed: {url}: {exc}") from exc
    data = response.content
    budget = _Budget(len(data), ExtractionLimits())
    if data[:2] == b"\x1f\x8b":
        data = _gunzip(data, budget)
    if len(data) < 262 or data[257:262] != b"ustar":
        raise CollectorError(f"snapshot at {url} is not a tar archive")
    _extract_tar(data, dest, budget)


def merge_manifests(manifests: Iterable[MirrorManifest]) -> MirrorManifest:
    """Union of several mirrors (distinct relative paths required)."""
    entries: list[ManifestEntry] = []
    for m in manifests:
        entries.extend(m.entries)
    return MirrorManifest(entries=entries, fetched_at=time.time())
