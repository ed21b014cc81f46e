"""JSON config file loading with dotted-key lookup.

Layout:
    {
      "verifier": {"path": "/usr/local/bin/verus", "timeout": 120},
      "llm": {"model": "...", "price_in_per_1k": 0.00027, "price_out_per_1k": 0.0011},
      "repair": {"max_attempts": 10, "num_cex": 10, "max_z3": 5, "n_mutants": 5},
      "solver": {"shim_path": "cexrepair-shim", "timeout": 60}
    }
"""

from __future__ import annotations

import json
import os

from .pipeline import RepairConfig


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def get(config: dict, dotted: str, default=None):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def repair_config(config: dict) -> RepairConfig:
    section = config.get("repair", {})
    cfg = RepairConfig.from_dict(section)
    if (timeout := get(config, "verifier.timeout")) is not None:
        cfg.verifier_timeout = float(timeout)
    if (timeout := get(config, "solver.timeout")) is not None:
        cfg.script_timeout = float(timeout)
    return cfg


def prices(config: dict) -> dict:
    return {
        "in_per_1k": float(get(config, "llm.price_in_per_1k", 0.0)),
        "out_per_1k": float(get(config, "llm.price_out_per_1k", 0.0)),
    }


def resolve_shim_path(config: dict) -> str:
    return (get(config, "solver.shim_path")
            or os.environ.get("CEXREPAIR_SHIM", "cexrepair-shim"))
