"""Global configuration file handling for the CLI.

One JSON file carries paths, thresholds, rule packs, the mapping table and
key-material references. Every value has a default; command-line flags win
over config values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import MinerforgeError
from .catalog import DEFAULT_VENDOR_ALIASES
from .collector import DEFAULT_MAX_DEPTH, DEFAULT_RATE_LIMIT, DEFAULT_USER_AGENT
from .dedup import DEFAULT_CHUNK_SIZE, DEFAULT_K, DEFAULT_MASTER_SEED, DEFAULT_THRESHOLD
from .extractor import ExtractionLimits


class ConfigError(MinerforgeError):
    pass


@dataclass
class Config:
    vendor_aliases: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_VENDOR_ALIASES))
    crawl_max_depth: int = DEFAULT_MAX_DEPTH
    crawl_rate_limit: float = DEFAULT_RATE_LIMIT
    crawl_same_origin: bool = True
    crawl_user_agent: str = DEFAULT_USER_AGENT
    extract_limits: ExtractionLimits = field(default_factory=ExtractionLimits)
    keys_file: str | None = None
    dedup_chunk_size: int = DEFAULT_CHUNK_SIZE
    dedup_k: int = DEFAULT_K
    dedup_threshold: float = DEFAULT_THRESHOLD
    dedup_master_seed: int = DEFAULT_MASTER_SEED
    rule_file: str | None = None
    include_builtin_rules: bool = True
    weak_hash_file: str | None = None
    mapping_table_file: str | None = None

    @classmethod
    def load(cls, path: Path | str | None) -> "Config":
        if path is None:
            return cls()
        try:
            raw: Mapping[str, Any] = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

        cfg = cls()
        cfg.vendor_aliases.update(raw.get("vendor_aliases", {}))
        crawl = raw.get("crawl", {})
        cfg.crawl_max_depth = int(crawl.get("max_depth", cfg.crawl_max_depth))
        cfg.crawl_rate_limit = float(crawl.get("rate_limit", cfg.crawl_rate_limit))
        cfg.crawl_same_origin = bool(crawl.get("same_origin", cfg.crawl_same_origin))
        cfg.crawl_user_agent = str(crawl.get("user_agent", cfg.crawl_user_agent))
        extract = raw.get("extract", {})
        cfg.extract_limits = ExtractionLimits(
            max_depth=int(extract.get("max_depth", cfg.extract_limits.max_depth)),
            max_expansion_ratio=float(
                extract.get("max_expansion_ratio", cfg.extract_limits.max_expansion_ratio)
            ),
            max_total_bytes=int(extract.get("max_total_bytes", cfg.extract_limits.max_total_bytes)),
        )
        cfg.keys_file = raw.get("keys_file", cfg.keys_file)
        dedup = raw.get("dedup", {})
        cfg.dedup_chunk_size = int(dedup.get("chunk_size", cfg.dedup_chunk_size))
        cfg.dedup_k = int(dedup.get("k", cfg.dedup_k))
        cfg.dedup_threshold = float(dedup.get("threshold", cfg.dedup_threshold))
        cfg.dedup_master_seed = int(dedup.get("master_seed", cfg.dedup_master_seed))
        scanner = raw.get("scanner", {})
        cfg.rule_file = scanner.get("rule_file", cfg.rule_file)
        cfg.include_builtin_rules = bool(scanner.get("include_builtins", cfg.include_builtin_rules))
        cfg.weak_hash_file = scanner.get("weak_hash_file", cfg.weak_hash_file)
        cfg.mapping_table_file = raw.get("mapping_table", cfg.mapping_table_file)
        return cfg
