from typing import Dict, Any, List, Optional
from collections import OrderedDict


def create_success_response(data: Any = None, message: Optional[str] = None, **kwargs) -> Dict[str, Any]:
    """Create a standardized success response"""
    response = OrderedDict([("success", True)])

    if data is not None:
        response["data"] = data

    if message:
        response["message"] = message

    # Add any additional kwargs
    response.update(kwargs)

    return response


def create_error_response(error: str, code: Optional[str] = None, **kwargs) -> Dict[str, Any]:
    """Create a standardized error response"""
    response = OrderedDict([
        ("success", False),
        ("error", error)
    ])

    if code:
        response["code"] = code

    # Add any additional kwargs
    response.update(kwargs)

    return response


def format_accuracy_table(accuracy: Dict[str, float], digits: int = 4) -> Dict[str, float]:
    """Round accuracies for display; the metrics files keep full precision"""
    return OrderedDict((mode, round(float(value), digits)) for mode, value in accuracy.items())


def format_run_summary(run_name: str, summary_rows: List[Dict[str, Any]]) -> Dict[str, Any]:
    """Format a summary.csv table for API responses"""
    return OrderedDict([
        ("run", run_name),
        ("metrics", [
            OrderedDict([
                ("metric", row.get("metric")),
                ("mean", round(float(row.get("mean", 0.0)), 4)),
                ("std", round(float(row.get("std", 0.0)), 4)),
                ("seeds", int(row.get("seeds", 0))),
            ])
            for row in summary_rows
        ]),
    ])
