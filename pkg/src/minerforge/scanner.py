"""Declarative rule engine and built-in parsers over firmware images.

Rules pair a path glob with one of five matcher kinds (file-presence,
content-regex, shadow-hash-class, symbol-import, url-scheme) and tag hits
with a vulnerability class, an entry point, and a severity. The built-in
pack covers the recurring weaknesses of miner firmware: boot-enabled SSH,
legacy cleartext services, weak or default password hashes, unsigned update
scripts, plaintext Stratum endpoints, cookie and client-side web flaws,
unsafe C string usage, and checksum-only bootloader integrity. The module
also fingerprints the embedded OS family and the mining software lineage.
"""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import MinerforgeError
from .extractor import FirmwareImage

log = logging.getLogger(__name__)

MATCHER_KINDS = (
    "file-presence",
    "content-regex",
    "shadow-hash-class",
    "symbol-import",
    "url-scheme",
)

VULN_CLASSES = (
    "WeakCredentials",
    "SshEnabled",
    "NoUpdateSignature",
    "PlaintextStratum",
    "PermissiveApiTrust",
    "WebAuthFlaw",
    "LegacyService",
    "ExposedMgmtDiscovery",
    "CookieWeakness",
    "UnsafeNative",
    "ChecksumOnlyBoot",
)

ENTRY_POINTS = ("FirmwareUpdate", "DebugSSH", "WebUI", "API", "Network")
SEVERITIES = ("Low", "Medium", "High", "Critical")

HASH_CLASSES = ("empty", "des", "md5crypt", "sha256crypt", "sha512crypt", "other")
WEAK_HASH_CLASSES = ("empty", "des", "md5crypt")

OS_FAMILIES = ("OpenWrt", "Buildroot", "AngstromOrOpenEmbedded", "Unknown")

MINER_NAMES = ("cpuminer-multi", "cpuminer", "bmminer", "btminer", "godminer", "cgminer")

EXCERPT_LIMIT = 200

_DES_HASH = re.compile(r"^[A-Za-z0-9./]{13}$")
_VERSION = re.compile(r"^\d+(\.\d+)*$")
_PRINTABLE_RUN = re.compile(rb"[\x20-\x7e]{4,}")


class RuleError(MinerforgeError):
    """Malformed rule file or rule record."""


@dataclass(frozen=True)
class Rule:
    rule_id: str
    description: str
    target: str
    matcher: str
    args: Mapping = field(default_factory=dict)
    vuln_class: str = "LegacyService"
    entry_point: str = "Network"
    severity: str = "Medium"

    def validate(self) -> None:
        if self.matcher not in MATCHER_KINDS:
            raise RuleError(f"rule {self.rule_id}: unknown matcher {self.matcher!r}")
        if self.vuln_class not in VULN_CLASSES:
            raise RuleError(f"rule {self.rule_id}: unknown class {self.vuln_class!r}")
        if self.entry_point not in ENTRY_POINTS:
            raise RuleError(f"rule {self.rule_id}: unknown entry_point {self.entry_point!r}")
        if self.severity not in SEVERITIES:
            raise RuleError(f"rule {self.rule_id}: unknown severity {self.severity!r}")
        if self.matcher == "content-regex":
            pattern = self.args.get("pattern")
            if not pattern:
                raise RuleError(f"rule {self.rule_id}: content-regex needs args.pattern")
            try:
                re.compile(pattern)
            except re.error as exc:
                raise RuleError(f"rule {self.rule_id}: bad pattern ({exc})") from exc
        elif self.matcher == "url-scheme":
            if not self.args.get("scheme"):
                raise RuleError(f"rule {self.rule_id}: url-scheme needs args.scheme")
        elif self.matcher == "symbol-import":
            symbols = self.args.get("symbols")
            if not symbols or not all(isinstance(s, str) for s in symbols):
                raise RuleError(f"rule {self.rule_id}: symbol-import needs args.symbols list")
        elif self.matcher == "shadow-hash-class":
            classes = self.args.get("weak_classes", list(WEAK_HASH_CLASSES))
            unknown = set(classes) - set(HASH_CLASSES)
            if unknown:
                raise RuleError(f"rule {self.rule_id}: unknown hash classes {sorted(unknown)}")


@dataclass(frozen=True)
class Finding:
    rule_id: str
    image_id: str
    evidence_path: str
    matched_excerpt: str
    vuln_class: str
    entry_point: str
    severity: str
    triage: str = "unreviewed"  # manual review state; never set automatically

    def to_json_obj(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "image_id": self.image_id,
            "evidence_path": self.evidence_path,
            "matched_excerpt": self.matched_excerpt,
            "vuln_class": self.vuln_class,
            "entry_point": self.entry_point,
            "severity": self.severity,
            "triage": self.triage,
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "Finding":
        return cls(
            rule_id=obj["rule_id"],
            image_id=obj["image_id"],
            evidence_path=obj["evidence_path"],
            matched_excerpt=obj["matched_excerpt"],
            vuln_class=obj["vuln_class"],
            entry_point=obj["entry_point"],
            severity=obj["severity"],
            triage=obj.get("triage", "unreviewed"),
        )


@dataclass(frozen=True)
class OsFingerprint:
    image_id: str
    os_family: str
    evidence: tuple[str, ...] = ()


@dataclass(frozen=True)
class MinerFingerprint:
    image_id: str
    miner_software: str
    version: str
    evidence_path: str = ""


class ShadowEntry:
    __slots__ = ("user", "hash_class", "locked")

    def __init__(self, user: str, hash_class: str, locked: bool) -> None:
        self.user = user
        self.hash_class = hash_class
        self.locked = locked

    def __iter__(self):
        return iter((self.user, self.hash_class, self.locked))

    def __eq__(self, other) -> bool:
        return tuple(self) == tuple(other)

    def __repr__(self) -> str:
        return f"ShadowEntry({self.user!r}, {self.hash_class!r}, locked={self.locked})"


# ---------------------------------------------------------------------------
# Built-in rule pack

BUILTIN_RULES: tuple[Rule, ...] = (
    Rule(
        "builtin-ssh-dropbear-boot",
        "Dropbear SSH service enabled by a boot init script",
        "etc/init.d/S??dropbear",
        "file-presence",
        {},
        "SshEnabled", "DebugSSH", "High",
    ),
    Rule(
        "builtin-ssh-sshd-boot",
        "OpenSSH service enabled by a boot init script",
        "etc/init.d/S??sshd",
        "file-presence",
        {},
        "SshEnabled", "DebugSSH", "High",
    ),
    Rule(
        "builtin-ssh-trigger-file",
        "SSH activation via temporary trigger file",
        "tmp/dropbear_on",
        "file-presence",
        {},
        "SshEnabled", "DebugSSH", "Medium",
    ),
    Rule(
        "builtin-ssh-config-password",
        "SSH service config allows password authentication",
        "etc/config/dropbear",
        "content-regex",
        {"pattern": r"(?im)^\s*option\s+(PasswordAuth|RootPasswordAuth)\s+'?(on|1)'?"},
        "SshEnabled", "DebugSSH", "Medium",
    ),
    Rule(
        "builtin-sshd-config-permissive",
        "sshd_config permits root login or password authentication",
        "etc/ssh/sshd_config",
        "content-regex",
        {"pattern": r"(?im)^\s*(PermitRootLogin|PasswordAuthentication)\s+yes"},
        "SshEnabled", "DebugSSH", "Medium",
    ),
    Rule(
        "builtin-legacy-services",
        "Legacy cleartext services (telnet/ftp/tftp) registered",
        "etc/services",
        "content-regex",
        {"pattern": r"(?im)^(telnet|ftp|tftp)\s"},
        "LegacyService", "Network", "Medium",
    ),
    Rule(
        "builtin-weak-shadow-hash",
        "Unlocked account with weak or dictionary-known password hash",
        "etc/shadow*",
        "shadow-hash-class",
        {"weak_classes": list(WEAK_HASH_CLASSES)},
        "WeakCredentials", "DebugSSH", "Critical",
    ),
    Rule(
        "builtin-update-unsigned",
        "Update script without signature-verification tokens",
        "**/*update*.sh",
        "content-regex",
        {
            "pattern": r"(?i)(verify|signature|openssl\s+dgst|rsa|public[_ -]?key)",
            "invert": True,
            "min_distinct": 2,
        },
        "NoUpdateSignature", "FirmwareUpdate", "High",
    ),
    Rule(
        "builtin-stratum-plaintext",
        "Mining pool endpoint configured over plaintext Stratum",
        "**/*",
        "url-scheme",
        {"scheme": "stratum+tcp://"},
        "PlaintextStratum", "Network", "Medium",
    ),
    Rule(
        "builtin-cookie-no-httponly",
        "Cookie issued without the HttpOnly attribute",
        "**/*",
        "content-regex",
        {"pattern": r"(?im)^.*Set-Cookie(?!.*HttpOnly).*$"},
        "CookieWeakness", "WebUI", "Medium",
    ),
    Rule(
        "builtin-cookie-client-set",
        "Client-side cookie assignment (cannot carry HttpOnly)",
        "**/*.js",
        "content-regex",
        {"pattern": r"document\.cookie\s*="},
        "CookieWeakness", "WebUI", "Medium",
    ),
    Rule(
        "builtin-client-auth-cookie",
        "Login page issues its session token from client-side code",
        "**/login.js",
        "content-regex",
        {"pattern": r"document\.cookie\s*="},
        "WebAuthFlaw", "WebUI", "High",
    ),
    Rule(
        "builtin-client-eval",
        "Client-side dynamic code execution via eval",
        "**/*.js",
        "content-regex",
        {"pattern": r"\beval\s*\("},
        "UnsafeNative", "WebUI", "Medium",
    ),
    Rule(
        "builtin-unsafe-c-imports",
        "Executable imports unchecked C string functions",
        "**/*",
        "symbol-import",
        {"symbols": ["sprintf", "strcpy", "gets"]},
        "UnsafeNative", "WebUI", "Medium",
    ),
    Rule(
        "builtin-unsafe-c-source",
        "C source calls unchecked string functions",
        "**/*.c",
        "content-regex",
        {"pattern": r"\b(sprintf|strcpy|gets)\s*\("},
        "UnsafeNative", "WebUI", "Low",
    ),
    Rule(
        "builtin-md5-auth-binary",
        "Authentication helper relies on unsalted MD5",
        "**/authpass*",
        "symbol-import",
        {"symbols": ["MD5_Init", "MD5_Update", "MD5_Final"]},
        "WeakCredentials", "WebUI", "Medium",
    ),
    Rule(
        "builtin-checksum-only-boot",
        "Bootloader integrity tracked by an external checksum file only",
        "etc/*.md5",
        "file-presence",
        {},
        "ChecksumOnlyBoot", "FirmwareUpdate", "High",
    ),
    Rule(
        "builtin-mgmt-discovery",
        "Network-reachable management discovery service enabled at boot",
        "etc/init.d/*discover*",
        "file-presence",
        {},
        "ExposedMgmtDiscovery", "API", "Medium",
    ),
    Rule(
        "builtin-csrf-post-form",
        "Privileged POST form without a CSRF token",
        "**/*.html",
        "content-regex",
        {"pattern": r"(?is)<form(?![^>]*csrf)[^>]*method=[\"']?post"},
        "WebAuthFlaw", "WebUI", "Medium",
    ),
    Rule(
        "builtin-api-permissive-allow",
        "Miner API grants write access to any client",
        "**/*.conf*",
        "content-regex",
        {"pattern": r"api-allow.{0,20}W:0/0"},
        "PermissiveApiTrust", "API", "High",
    ),
)


def load_rules(
    rule_file: Path | str | None,
    include_builtins: bool = True,
) -> list[Rule]:
    """Load JSON-lines rules, built-in pack first unless suppressed.

    A malformed record is fatal and names the line and field; duplicate
    rule_ids are rejected across the combined pack.
    """
    rules: list[Rule] = list(BUILTIN_RULES) if include_builtins else []
    if rule_file is not None:
        for i, line in enumerate(Path(rule_file).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RuleError(f"{rule_file}: line {i}: invalid JSON ({exc})") from exc
            for field_name in ("id", "target", "matcher"):
                if field_name not in obj:
                    raise RuleError(f"{rule_file}: line {i}: missing field {field_name!r}")
            rule = Rule(
                rule_id=obj["id"],
                description=obj.get("description", ""),
                target=obj["target"],
                matcher=obj["matcher"],
                args=obj.get("args", {}),
                vuln_class=obj.get("class", "LegacyService"),
                entry_point=obj.get("entry_point", "Network"),
                severity=obj.get("severity", "Medium"),
            )
            try:
                rule.validate()
            except RuleError as exc:
                raise RuleError(f"{rule_file}: line {i}: {exc}") from exc
            rules.append(rule)
    seen: set[str] = set()
    for rule in rules:
        if rule.rule_id in seen:
            raise RuleError(f"duplicate rule_id {rule.rule_id!r}")
        seen.add(rule.rule_id)
        rule.validate()
    return rules


# ---------------------------------------------------------------------------
# Shadow parsing


def parse_shadow(content: str) -> list[ShadowEntry]:
    """Classify shadow(5) records by crypt prefix.

    $1$ -> md5crypt, $5$ -> sha256crypt, $6$ -> sha512crypt, empty field ->
    empty, 13-char crypt64 -> des, anything else -> other. A leading '!' or
    '*' marks the account locked (the class is taken from the remainder).
    Malformed lines are skipped with a diagnostic.
    """
    entries: list[ShadowEntry] = []
    for lineno, line in enumerate(content.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split(":")
        if len(fields) < 2 or not fields[0]:
            log.warning("shadow line %d malformed, skipped", lineno)
            continue
        user, hash_field = fields[0], fields[1]
        locked = hash_field.startswith(("!", "*"))
        body = hash_field.lstrip("!*")
        if hash_field == "":
            hash_class = "empty"
        elif body.startswith("$1$"):
            hash_class = "md5crypt"
        elif body.startswith("$5$"):
            hash_class = "sha256crypt"
        elif body.startswith("$6$"):
            hash_class = "sha512crypt"
        elif _DES_HASH.match(body):
            hash_class = "des"
        else:
            hash_class = "other"
        entries.append(ShadowEntry(user, hash_class, locked))
    return entries


# ---------------------------------------------------------------------------
# Matchers


def _read_text(path: Path) -> str:
    return path.read_bytes().decode("utf-8", "replace")


def _excerpt(text: str) -> str:
    return text[:EXCERPT_LIMIT]


def _extract_strings(data: bytes) -> list[str]:
    return [m.group(0).decode("ascii") for m in _PRINTABLE_RUN.finditer(data)]


def _elf_dynstr(data: bytes) -> bytes | None:
    """Pull the .dynstr blob out of an ELF, or None when unparsable."""
    try:
        if not data.startswith(b"\x7fELF"):
            return None
        is64 = data[4] == 2
        endian = "<" if data[5] == 1 else ">"
        if is64:
            e_shoff, = struct.unpack_from(endian + "Q", data, 0x28)
            e_shentsize, e_shnum, e_shstrndx = struct.unpack_from(endian + "HHH", data, 0x3A)
            name_off, off_off, size_off = 0x0, 0x18, 0x20
            off_fmt = "Q"
        else:
            e_shoff, = struct.unpack_from(endian + "I", data, 0x20)
            e_shentsize, e_shnum, e_shstrndx = struct.unpack_from(endian + "HHH", data, 0x2E)
            name_off, off_off, size_off = 0x0, 0x10, 0x14
            off_fmt = "I"
        if e_shoff == 0 or e_shnum == 0 or e_shstrndx >= e_shnum:
            return None
        def section(idx: int) -> tuple[int, int, int]:
            base = e_shoff + idx * e_shentsize
            sh_name, = struct.unpack_from(endian + "I", data, base + name_off)
            sh_offset, = struct.unpack_from(endian + off_fmt, data, base + off_off)
            sh_size, = struct.unpack_from(endian + off_fmt, data, base + size_off)
            return sh_name, sh_offset, sh_size
        _, str_off, str_size = section(e_shstrndx)
        shstrtab = data[str_off:str_off + str_size]
        for idx in range(e_shnum):
            sh_name, sh_offset, sh_size = section(idx)
            end = shstrtab.find(b"\0", sh_name)
            if shstrtab[sh_name:end] == b".dynstr":
                return data[sh_offset:sh_offset + sh_size]
        return None
    except (struct.error, IndexError, ValueError):
        return None


def _symbol_strings(path: Path) -> list[str] | None:
    """Symbol-name strings of an executable; None when not an executable.

    Reads the ELF dynamic-symbol string region when the section headers
    parse; otherwise falls back to printable-string extraction.
    """
    data = path.read_bytes()
    is_elf = data.startswith(b"\x7fELF")
    if not is_elf and not (path.stat().st_mode & 0o111):
        return None
    dynstr = _elf_dynstr(data) if is_elf else None
    if dynstr is not None:
        return [s.decode("ascii", "replace") for s in dynstr.split(b"\0") if s]
    return _extract_strings(data)


def _strip_comment_lines(text: str) -> Iterable[str]:
    for line in text.splitlines():
        stripped = line.lstrip()
        if stripped.startswith("#") or stripped.startswith("//"):
            continue
        yield line


def _apply_rule(
    rule: Rule,
    image_id: str,
    root: Path,
    path: Path,
    weak_hash_dictionary: frozenset[str],
) -> Finding | None:
    rel = path.relative_to(root).as_posix()

    def finding(excerpt: str) -> Finding:
        return Finding(
            rule_id=rule.rule_id,
            image_id=image_id,
            evidence_path=rel,
            matched_excerpt=_excerpt(excerpt),
            vuln_class=rule.vuln_class,
            entry_point=rule.entry_point,
            severity=rule.severity,
        )

    if rule.matcher == "file-presence":
        return finding(path.name)

    if rule.matcher == "content-regex":
        text = _read_text(path)
        pattern = re.compile(rule.args["pattern"])
        matches = {m.group(0) for m in pattern.finditer(text)}
        min_distinct = int(rule.args.get("min_distinct", 1))
        hit = len(matches) >= min_distinct
        if rule.args.get("invert"):
            if not hit:
                return finding("required tokens absent or partial")
            return None
        if hit:
            return finding(sorted(matches)[0])
        return None

    if rule.matcher == "url-scheme":
        scheme = rule.args["scheme"]
        for line in _strip_comment_lines(_read_text(path)):
            idx = line.find(scheme)
            if idx != -1:
                return finding(line[idx:].strip())
        return None

    if rule.matcher == "shadow-hash-class":
        weak = set(rule.args.get("weak_classes", WEAK_HASH_CLASSES))
        text = _read_text(path)
        for entry in parse_shadow(text):
            if entry.locked:
                continue
            hash_field = _shadow_hash_field(text, entry.user)
            if entry.hash_class in weak or hash_field in weak_hash_dictionary:
                reason = (
                    f"{entry.user}:{entry.hash_class}"
                    if entry.hash_class in weak
                    else f"{entry.user}:dictionary-hash"
                )
                return finding(reason)
        return None

    if rule.matcher == "symbol-import":
        symbols = _symbol_strings(path)
        if symbols is None:
            return None
        wanted = set(rule.args["symbols"])
        present = sorted(wanted.intersection(symbols))
        if present:
            return finding(",".join(present))
        return None

    raise RuleError(f"rule {rule.rule_id}: unknown matcher {rule.matcher!r}")


def _shadow_hash_field(content: str, user: str) -> str:
    for line in content.splitlines():
        fields = line.split(":")
        if len(fields) >= 2 and fields[0] == user:
            return fields[1]
    return ""


def scan_image(
    image: FirmwareImage,
    rules: Sequence[Rule],
    weak_hash_dictionary: Iterable[str] = (),
) -> list[Finding]:
    """Evaluate every rule over its matching paths in the image root.

    Unreadable files are skipped with a diagnostic; content never aborts a
    scan. At most one finding is emitted per (rule, file). Output is sorted
    by (rule_id, evidence_path).
    """
    root = image.root
    dictionary = frozenset(weak_hash_dictionary)
    findings: list[Finding] = []
    for rule in rules:
        for path in sorted(root.glob(rule.target)):
            if not path.is_file() or path.is_symlink():
                continue
            try:
                result = _apply_rule(rule, image.image_id, root, path, dictionary)
            except OSError as exc:
                log.warning("scan skipped %s (%s): %s", path, rule.rule_id, exc)
                continue
            if result is not None:
                findings.append(result)
    findings.sort(key=lambda f: (f.rule_id, f.evidence_path))
    return findings


# ---------------------------------------------------------------------------
# OS fingerprinting


def detect_os(image: FirmwareImage) -> OsFingerprint:
    """First match wins: OpenWrt, then Buildroot, then Angstrom/OE, else
    Unknown. Priority is stable regardless of extra markers further down."""
    root = image.root
    evidence: list[str] = []

    if (root / "etc/openwrt_release").is_file():
        evidence.append("etc/openwrt_release")
    config_dir = root / "etc/config"
    if config_dir.is_dir() and any(p.is_file() for p in config_dir.iterdir()):
        evidence.append("etc/config/")
    if evidence:
        return OsFingerprint(image.image_id, "OpenWrt", tuple(evidence))

    for candidate in ("etc/os-release", "usr/lib/os-release"):
        path = root / candidate
        if path.is_file() and "buildroot" in _read_text(path).lower():
            return OsFingerprint(image.image_id, "Buildroot", (candidate,))

    if (root / "etc/angstrom-version").is_file():
        return OsFingerprint(image.image_id, "AngstromOrOpenEmbedded", ("etc/angstrom-version",))
    for candidate in ("etc/opkg", "usr/lib/opkg"):
        if (root / candidate).is_dir():
            return OsFingerprint(image.image_id, "AngstromOrOpenEmbedded", (candidate + "/",))

    return OsFingerprint(image.image_id, "Unknown", ())


# ---------------------------------------------------------------------------
# Miner fingerprinting


def fingerprint_miner(image: FirmwareImage) -> MinerFingerprint:
    """Printable-string search for known mining-software names; the longest
    version-bearing name wins, then a versionless name, else unknown."""
    best_name = ""
    best_version = ""
    best_path = ""
    name_only: tuple[str, str] | None = None

    for path in image.iter_files():
        data = path.read_bytes()
        if not (data.startswith(b"\x7fELF") or path.stat().st_mode & 0o111):
            continue
        text = "\n".join(_extract_strings(data))
        for name in sorted(MINER_NAMES, key=len, reverse=True):
            if name not in text:
                continue
            m = re.search(re.escape(name) + r"[ \t_/-]*v?(\d+(?:\.\d+)*)", text)
            if m and len(name) > len(best_name):
                best_name = name
                best_version = m.group(1)
                best_path = path.relative_to(image.root).as_posix()
            elif name_only is None or len(name) > len(name_only[0]):
                name_only = (name, path.relative_to(image.root).as_posix())

    if best_name:
        return MinerFingerprint(image.image_id, best_name, best_version, best_path)
    if name_only is not None:
        return MinerFingerprint(image.image_id, name_only[0], "unknown", name_only[1])
    return MinerFingerprint(image.image_id, "unknown", "unknown")


def write_findings(findings: Iterable[Finding], path: Path | str) -> None:
    lines = [json.dumps(f.to_json_obj(), separators=(",", ":")) for f in findings]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_findings(path: Path | str) -> list[Finding]:
    return [
        Finding.from_json_obj(json.loads(line))
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
