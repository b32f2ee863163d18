"""Umbrella command line: catalog | crawl | extract | dedup | scan | infer | report.

Exit codes: 0 success, 1 fatal consistency/toolkit error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import MinerforgeError, UsageError, __version__
from . import attack_model, catalog, collector, dedup, extractor, reporting, scanner
from .config import Config

log = logging.getLogger("minerforge")


def _cmd_catalog(args: argparse.Namespace, cfg: Config) -> int:
    records = catalog.ingest_directory(args.input, cfg.vendor_aliases, jobs=args.jobs)
    catalog.write_catalog(records, args.out)
    log.info("cataloged %d distinct artifacts -> %s", len(records), args.out)
    return 0


def _cmd_crawl(args: argparse.Namespace, cfg: Config) -> int:
    plan = collector.CrawlPlan(
        root_url=args.root,
        max_depth=args.depth if args.depth is not None else cfg.crawl_max_depth,
        allow_patterns=args.allow or [],
        rate_limit=args.rate if args.rate is not None else cfg.crawl_rate_limit,
        same_origin=cfg.crawl_same_origin,
        user_agent=cfg.crawl_user_agent,
    )
    result = collector.crawl_index(plan, args.out)
    log.info(
        "mirrored %d files (%d downloaded, %d reused) -> %s",
        len(result.manifest.entries),
        result.stats.files_downloaded,
        result.stats.files_reused,
        args.out,
    )
    return 0


def _build_plugins(args: argparse.Namespace, cfg: Config) -> list[extractor.DecryptorPlugin]:
    keys_file = args.keys or cfg.keys_file
    plugin = extractor.CbcDecryptorPlugin(
        key_material=extractor.load_key_material("ref-cbc", keys_file)
    )
    return [plugin]


def _cmd_extract(args: argparse.Namespace, cfg: Config) -> int:
    if args.catalog:
        records = catalog.read_catalog(args.catalog)
    else:
        records = catalog.ingest_directory(args.input, cfg.vendor_aliases)
    images, outcomes = extractor.run_reduction(
        records,
        data_dir=args.input,
        out_dir=args.out,
        plugins=_build_plugins(args, cfg),
        limits=cfg.extract_limits,
        jobs=args.jobs,
    )
    extractor.write_outcomes(outcomes, Path(args.out) / "outcomes.jsonl")
    catalog.write_catalog(records, Path(args.out) / "catalog.jsonl")
    log.info("extracted %d images from %d artifacts", len(images), len(records))
    return 0


def _load_images(images_dir: Path) -> list[extractor.FirmwareImage]:
    images = []
    for meta in sorted(images_dir.glob("*/meta.json")):
        images.append(extractor.load_image(meta.parent))
    return images


def _cmd_dedup(args: argparse.Namespace, cfg: Config) -> int:
    images_dir = Path(args.input)
    images = _load_images(images_dir)
    if not images:
        raise MinerforgeError(f"no extracted images under {images_dir}")
    generations: dict[str, str] = {}
    catalog_path = images_dir / "catalog.jsonl"
    if catalog_path.exists():
        generations = {
            r.artifact_id: r.generation for r in catalog.read_catalog(catalog_path)
        }
    seeds = dedup.make_seeds(cfg.dedup_k, cfg.dedup_master_seed)
    signatures = [dedup.signature(im, cfg.dedup_chunk_size, seeds) for im in images]
    clusters = dedup.cluster(signatures, threshold=args.threshold, mode=args.mode)
    meta = {
        im.image_id: dedup.ImageMeta(
            image_id=im.image_id,
            completeness=im.completeness,
            file_count=len(im.iter_files()),
            generation=generations.get(im.artifact_id, "unknown"),
        )
        for im in images
    }
    dedup.elect_representatives(clusters, meta)
    dedup.write_clusters(clusters, args.out)

    outcomes_path = images_dir / "outcomes.jsonl"
    if outcomes_path.exists():
        outcomes = extractor.read_outcomes(outcomes_path)
        reasons = dedup.dedup_outcome_reasons(clusters)
        image_artifact = {im.image_id: im.artifact_id for im in images}
        for image_id, (verdict, reason) in sorted(reasons.items()):
            outcomes.append(
                extractor.StageOutcome(
                    extractor.STAGE_DEDUPLICATION, image_artifact[image_id], verdict, reason
                )
            )
        extractor.write_outcomes(outcomes, outcomes_path)
    log.info("%d images -> %d clusters", len(images), len(clusters))
    return 0


def _image_from_dir(path: Path) -> extractor.FirmwareImage:
    if (path / "meta.json").exists():
        return extractor.load_image(path)
    return extractor.FirmwareImage(image_id=path.name, artifact_id=path.name, root=path)


def _cmd_scan(args: argparse.Namespace, cfg: Config) -> int:
    image = _image_from_dir(Path(args.image))
    rules = scanner.load_rules(
        args.rules or cfg.rule_file, include_builtins=cfg.include_builtin_rules
    )
    weak_hashes: list[str] = []
    weak_file = args.weak_hashes or cfg.weak_hash_file
    if weak_file:
        weak_hashes = [
            line.strip()
            for line in Path(weak_file).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    findings = scanner.scan_image(image, rules, weak_hashes)
    scanner.write_findings(findings, args.out)
    if args.fingerprints:
        os_fp = scanner.detect_os(image)
        miner_fp = scanner.fingerprint_miner(image)
        lines = [
            json.dumps(
                {
                    "image_id": os_fp.image_id,
                    "os_family": os_fp.os_family,
                    "os_evidence": list(os_fp.evidence),
                    "miner_software": miner_fp.miner_software,
                    "miner_version": miner_fp.version,
                    "miner_evidence": miner_fp.evidence_path,
                },
                separators=(",", ":"),
            )
        ]
        Path(args.fingerprints).write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("%d findings -> %s", len(findings), args.out)
    return 0


def _cmd_infer(args: argparse.Namespace, cfg: Config) -> int:
    findings = scanner.read_findings(args.findings)
    mapping_file = args.mapping or cfg.mapping_table_file
    table = (
        attack_model.MappingTable.load(mapping_file)
        if mapping_file
        else attack_model.default_mapping_table()
    )
    by_image: dict[str, list[scanner.Finding]] = {}
    for f in findings:
        by_image.setdefault(f.image_id, []).append(f)
    profiles = []
    for image_id in sorted(by_image):
        profile = attack_model.infer_capabilities(
            by_image[image_id], table, include_on_path=not args.lan_only
        )
        profiles.append((image_id, profile, attack_model.dominant_scenario(profile)))

    if args.format == "csv":
        lines = ["image_id,objective,color,capabilities"]
        lines.extend(
            f"{image_id},{objective.name},{objective.color},"
            + ";".join(sorted(profile.capabilities))
            for image_id, profile, objective in profiles
        )
    else:
        lines = [
            json.dumps(
                {
                    "image_id": image_id,
                    "capabilities": sorted(profile.capabilities),
                    "objective": objective.name,
                    "color": objective.color,
                    "contributing": [list(c) for c in profile.contributing],
                },
                separators=(",", ":"),
            )
            for image_id, profile, objective in profiles
        ]
    Path(args.out).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    log.info("classified %d images -> %s", len(by_image), args.out)
    return 0


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        flags = ", ".join(f"--{n}" for n in missing)
        raise UsageError(f"--kind {args.kind} requires {flags}")


def _cmd_report(args: argparse.Namespace, cfg: Config) -> int:
    if args.kind == "funnel":
        _require(args, "outcomes")
        outcomes = extractor.read_outcomes(args.outcomes)
        report = reporting.funnel_report(outcomes, initial_cause=args.initial_cause)
    elif args.kind == "summary":
        _require(args, "catalog", "images")
        records = catalog.read_catalog(args.catalog)
        images = _load_images(Path(args.images))
        report = reporting.corpus_summary(records, images)
    elif args.kind == "matrix":
        _require(args, "inventory", "objectives")
        inventory = catalog.load_inventory(args.inventory)
        objectives: dict[tuple[str, str], attack_model.Objective | None] = {}
        for line in Path(args.objectives).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            objective = (
                attack_model.objective_by_name(obj["objective"])
                if obj.get("objective")
                else None
            )
            objectives[(obj["manufacturer"], obj["model_name"])] = objective
        report = attack_model.scenario_matrix(objectives, inventory)
    else:  # pragma: no cover - argparse restricts choices
        raise MinerforgeError(f"unknown report kind {args.kind}")

    data = reporting.render(report, args.format)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minerforge",
        description="Firmware attack-surface analysis pipeline for ASIC miners",
    )
    parser.add_argument("--version", action="version", version=f"minerforge {__version__}")
    parser.add_argument("--config", help="global JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("catalog", help="ingest a directory of artifacts into a catalog")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_catalog)

    p = sub.add_parser("crawl", help="mirror a static directory index")
    p.add_argument("--root", required=True)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--allow", action="append", help="glob filter, repeatable")
    p.add_argument("--rate", type=float, default=None, help="requests per second")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_crawl)

    p = sub.add_parser("extract", help="validate, decrypt and unpack artifacts")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--catalog", help="existing catalog jsonl (default: ingest --in)")
    p.add_argument("--keys", help="JSON key-material file for decryptor plugins")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("dedup", help="cluster near-identical images")
    p.add_argument("--in", dest="input", required=True, help="extract output directory")
    p.add_argument("--threshold", type=float, default=dedup.DEFAULT_THRESHOLD)
    p.add_argument("--mode", choices=(dedup.MODE_EXACT, dedup.MODE_ESTIMATED),
                   default=dedup.MODE_ESTIMATED)
    p.add_argument("--out", required=True, help="cluster report jsonl")
    p.set_defaults(func=_cmd_dedup)

    p = sub.add_parser("scan", help="apply the rule engine to one image")
    p.add_argument("--image", required=True, help="image directory (with meta.json) or bare rootfs")
    p.add_argument("--rules", help="additional rule pack (jsonl)")
    p.add_argument("--weak-hashes", dest="weak_hashes", help="known-default hash list, one per line")
    p.add_argument("--fingerprints", help="also write OS/miner fingerprints here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_scan)

    p = sub.add_parser("infer", help="capability profiles and dominant scenarios from findings")
    p.add_argument("--findings", required=True)
    p.add_argument("--mapping", help="mapping-table override (jsonl)")
    p.add_argument("--lan-only", action="store_true",
                   help="drop findings that need an on-path network adversary")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("report", help="render funnel/summary/matrix reports")
    p.add_argument("--kind", choices=("funnel", "summary", "matrix"), required=True)
    p.add_argument("--format", choices=reporting.FORMATS, default=reporting.FORMAT_MARKDOWN)
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--outcomes", help="stage outcomes jsonl (funnel)")
    p.add_argument("--initial-cause", dest="initial_cause", default="",
                   help="main-cause label for the initial funnel row")
    p.add_argument("--catalog", help="catalog jsonl (summary)")
    p.add_argument("--images", help="extract output directory (summary)")
    p.add_argument("--inventory", help="model inventory csv (matrix)")
    p.add_argument("--objectives", help="per-model objectives jsonl (matrix)")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = Config.load(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except MinerforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
