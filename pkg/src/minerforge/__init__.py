"""Firmware attack-surface analysis toolkit for ASIC-miner ecosystems.

The package is organized as a pipeline over vendor-distributed firmware
artifacts: collect (collector), catalog (catalog), reduce and reconstruct
(extractor), deduplicate (dedup), scan (scanner), infer attack scenarios
(attack_model), and aggregate (reporting). The `minerforge` CLI wires the
stages together.
"""

__version__ = "0.1.0"


class MinerforgeError(Exception):
    """Base class for fatal toolkit errors (CLI exit code 1)."""


class ConsistencyError(MinerforgeError):
    """Raised when aggregate bookkeeping is internally inconsistent."""


class UsageError(MinerforgeError):
    """Bad invocation that argparse cannot express (CLI exit code 2)."""
