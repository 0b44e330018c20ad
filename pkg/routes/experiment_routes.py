import json
import logging
from pathlib import Path

import pandas as pd
from flask import Blueprint, current_app, jsonify, request

from config import Config
from constants.profiles import ProfileConstants
from constants.recipes import RecipeConstants
from services.experiment_config import build_experiment_config
from services.experiment_service import DIMS_JSON, SUMMARY_CSV, experiment_service
from services.inference_service import certainty, weighted_logits
from utils.response_helpers import (
    create_error_response, create_success_response, format_accuracy_table, format_run_summary,
)
from utils.validators import validate_flat_config, validate_logit_sources, validate_run_name, validate_temperature

logger = logging.getLogger(__name__)

experiment_bp = Blueprint('experiment', __name__)


def _results_dir() -> Path:
    return Path(current_app.config.get('RESULTS_DIR', Config.RESULTS_DIR))


def _run_dir(run_name: str):
    """Resolve a run directory, or return an error response tuple"""
    validation = validate_run_name(run_name)
    if not validation["valid"]:
        return None, (jsonify(create_error_response(validation["error"])), 400)
    run_dir = _results_dir() / run_name
    if not run_dir.is_dir():
        return None, (jsonify(create_error_response(f"Run '{run_name}' not found")), 404)
    return run_dir, None


@experiment_bp.route('/recipes', methods=['GET'])
def get_recipes():
    """List the named synthetic recipes and training profiles"""
    recipes = {
        name: {"description": preset.description, "fields": preset.fields}
        for name, preset in RecipeConstants.RECIPE_MAP.items()
    }
    profiles = ProfileConstants.describe()
    return jsonify(create_success_response(
        data={"recipes": recipes, "profiles": profiles},
        default_recipe=RecipeConstants.DEFAULT_RECIPE,
        default_profile=ProfileConstants.DEFAULT_PROFILE,
    )), 200


@experiment_bp.route('/run', methods=['POST'])
def run_experiment():
    """Run an experiment from a flat dotted-key config body"""
    data = request.get_json(silent=True)
    validation = validate_flat_config(data)
    if not validation["valid"]:
        return jsonify(create_error_response(validation["error"])), 400

    # results always land under the server's results directory
    data = {**data, "output_dir": str(_results_dir())}
    config = build_experiment_config(data)
    run_name_check = validate_run_name(config.name)
    if not run_name_check["valid"]:
        return jsonify(create_error_response(run_name_check["error"])), 400

    logger.info(f"API run requested: name={config.name} mode={config.plan.mode} seeds={config.run_seeds}")
    run_dir = experiment_service.run_experiment(config)
    results = experiment_service.read_results(run_dir)
    summary = pd.read_csv(run_dir / SUMMARY_CSV).to_dict(orient="records")

    return jsonify(create_success_response(
        data={
            "summary": format_run_summary(config.name, summary),
            "seeds": [
                {"seed": r["seed"], "accuracy": format_accuracy_table(r["accuracy"]), "multimodal": r.get("multimodal")}
                for r in results
            ],
        },
        message=f"Run '{config.name}' completed",
    )), 200


@experiment_bp.route('/<run_name>/metrics', methods=['GET'])
def get_metrics(run_name):
    """Summary and per-seed metrics of a finished run"""
    run_dir, error = _run_dir(run_name)
    if error:
        return error
    try:
        results = experiment_service.read_results(run_dir)
    except FileNotFoundError as e:
        return jsonify(create_error_response(str(e))), 404

    summary_path = run_dir / SUMMARY_CSV
    summary = pd.read_csv(summary_path).to_dict(orient="records") if summary_path.exists() else []
    return jsonify(create_success_response(
        data={"summary": format_run_summary(run_name, summary), "seeds": results}
    )), 200


@experiment_bp.route('/<run_name>/dims', methods=['GET'])
def get_dims(run_name):
    """Dimension partition reports of every seed of a run"""
    run_dir, error = _run_dir(run_name)
    if error:
        return error

    reports = {}
    for dims_path in sorted(run_dir.glob(f"seed_*/{DIMS_JSON}")):
        reports[dims_path.parent.name] = json.loads(dims_path.read_text())

    if not reports:
        return jsonify(create_error_response(
            f"Run '{run_name}' has no dimension partition (mode without separation stage)"
        )), 404
    return jsonify(create_success_response(data=reports)), 200


@experiment_bp.route('/weighted-logits', methods=['POST'])
def post_weighted_logits():
    """Certainty-weighted combination of posted logit matrices"""
    data = request.get_json(silent=True) or {}
    validation = validate_logit_sources(data.get("logits"))
    if not validation["valid"]:
        return jsonify(create_error_response(validation["error"])), 400

    t_lw = data.get("T_lw", 1.0)
    validation = validate_temperature(t_lw)
    if not validation["valid"]:
        return jsonify(create_error_response(validation["error"])), 400

    combined, weights = weighted_logits(data["logits"], float(t_lw))
    certainties = [certainty(z).tolist() for z in data["logits"]]
    return jsonify(create_success_response(data={
        "logits": combined.tolist(),
        "weights": weights.tolist(),
        "certainties": certainties,
        "predictions": combined.argmax(axis=1).tolist(),
    })), 200
