import re
from typing import Any, Dict, List

import numpy as np

RUN_NAME_PATTERN = re.compile(r'^[A-Za-z0-9._-]+$')


def validate_run_name(run_name: str) -> Dict[str, Any]:
    """Validate a results directory name (no path separators)"""
    if not run_name or not isinstance(run_name, str):
        return {"valid": False, "error": "Run name must be a non-empty string"}

    if not RUN_NAME_PATTERN.match(run_name) or run_name in ('.', '..'):
        return {"valid": False, "error": "Invalid run name format"}

    return {"valid": True}


def validate_temperature(value: Any, name: str = "T_lw") -> Dict[str, Any]:
    """Validate a positive finite temperature"""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return {"valid": False, "error": f"{name} must be a number"}

    if not np.isfinite(value) or value <= 0:
        return {"valid": False, "error": f"{name} must be positive and finite"}

    return {"valid": True}


def validate_logit_sources(sources: Any) -> Dict[str, Any]:
    """Validate a list of equally shaped B x K logit matrices"""
    if not isinstance(sources, list) or not sources:
        return {"valid": False, "error": "logits must be a non-empty list of matrices"}

    shapes: List[tuple] = []
    for index, source in enumerate(sources):
        try:
            arr = np.asarray(source, dtype=np.float64)
        except (TypeError, ValueError):
            return {"valid": False, "error": f"logits[{index}] is not a numeric matrix"}
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            return {"valid": False, "error": f"logits[{index}] must be a non-empty B x K matrix"}
        if not np.all(np.isfinite(arr)):
            return {"valid": False, "error": f"logits[{index}] contains non-finite values"}
        shapes.append(arr.shape)

    if len(set(shapes)) != 1:
        return {"valid": False, "error": f"all logit matrices must share one shape, got {shapes}"}

    return {"valid": True}


def validate_flat_config(data: Any) -> Dict[str, Any]:
    """Validate that a request body looks like a flat dotted-key config"""
    if not isinstance(data, dict):
        return {"valid": False, "error": "Config must be a JSON object"}

    bad_keys = [k for k in data if not isinstance(k, str) or not k]
    if bad_keys:
        return {"valid": False, "error": f"Config keys must be non-empty strings: {bad_keys}"}

    return {"valid": True}
