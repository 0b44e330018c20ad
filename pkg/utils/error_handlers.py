import logging
from typing import Optional

from flask import jsonify
from werkzeug.exceptions import HTTPException

logger = logging.getLogger(__name__)


class DIMMLError(Exception):
    """Base class for every error raised by the training pipeline"""


class InvalidArgumentError(DIMMLError, ValueError):
    """Shape mismatch, empty tensor, out-of-range label, bad temperature, unknown mode"""


class InvalidRecipeError(InvalidArgumentError):
    """Synthetic recipe whose dimension sets or sample counts are inconsistent"""


class MissingClassError(InvalidArgumentError):
    """A class has no samples where at least one is required"""

    def __init__(self, class_index: int, message: Optional[str] = None):
        self.class_index = class_index
        super().__init__(message or f"class {class_index} has no samples")


class NumericError(DIMMLError, ArithmeticError):
    """Non-finite value produced or consumed by a numeric routine"""

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(message)


class ConfigValidationError(DIMMLError):
    """Experiment configuration rejected; `key` is the dotted config key"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ContainerFormatError(DIMMLError):
    """Malformed dataset or checkpoint container"""


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code (1 validation, 2 runtime/numeric)"""
    if isinstance(error, (ConfigValidationError, InvalidArgumentError, FileNotFoundError)):
        return 1
    return 2


def format_error_for_logging(error: BaseException, context: Optional[str] = None) -> str:
    """Format error for logging purposes"""
    error_msg = f"{type(error).__name__}: {str(error)}"
    if context:
        error_msg = f"[{context}] {error_msg}"
    return error_msg


def register_error_handlers(app):
    """Register error handlers for the Flask application"""

    @app.errorhandler(ConfigValidationError)
    def config_invalid(error):
        """Handle rejected experiment configurations"""
        logger.warning(f"Config Validation Error: {error}")
        return jsonify({
            "success": False,
            "error": "Bad Request",
            "message": str(error),
            "key": error.key
        }), 400

    @app.errorhandler(InvalidArgumentError)
    def invalid_argument(error):
        """Handle semantically invalid arguments"""
        logger.warning(f"Invalid Argument: {error}")
        return jsonify({
            "success": False,
            "error": "Unprocessable Entity",
            "message": str(error)
        }), 422

    @app.errorhandler(NumericError)
    def numeric_failure(error):
        """Handle non-finite values during training or evaluation"""
        logger.error(f"Numeric Error: {error}")
        return jsonify({
            "success": False,
            "error": "Numeric Error",
            "message": str(error),
            "parameter": error.parameter
        }), 500

    @app.errorhandler(404)
    def not_found(error):
        """Handle 404 Not Found errors"""
        logger.info(f"Not Found: {error.description}")
        return jsonify({
            "success": False,
            "error": "Not Found",
            "message": "The requested resource was not found"
        }), 404

    @app.errorhandler(405)
    def method_not_allowed(error):
        """Handle 405 Method Not Allowed errors"""
        logger.warning(f"Method Not Allowed: {error.description}")
        return jsonify({
            "success": False,
            "error": "Method Not Allowed",
            "message": "The requested method is not allowed for this endpoint"
        }), 405

    @app.errorhandler(HTTPException)
    def handle_http_exception(error):
        """Handle general HTTP exceptions"""
        logger.warning(f"HTTP Exception {error.code}: {error.description}")
        return jsonify({
            "success": False,
            "error": error.name,
            "message": error.description
        }), error.code

    @app.errorhandler(Exception)
    def handle_general_exception(error):
        """Handle general exceptions"""
        logger.error(f"Unhandled Exception: {format_error_for_logging(error)}", exc_info=True)
        return jsonify({
            "success": False,
            "error": "Internal Server Error",
            "message": "An unexpected error occurred. Check the server log."
        }), 500
