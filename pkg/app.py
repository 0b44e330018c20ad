import logging
from typing import Any, Dict, Optional

from flask import Flask
from flask_cors import CORS
from werkzeug.middleware.proxy_fix import ProxyFix

# Import route blueprints
from routes.experiment_routes import experiment_bp

# Import error handlers
from utils.error_handlers import register_error_handlers

from config import Config, configure_logging

configure_logging()


def create_app(overrides: Optional[Dict[str, Any]] = None):
    """Application factory pattern for creating Flask app"""
    app = Flask(__name__)

    # Configuration
    app.config.from_object('config.Config')
    if overrides:
        app.config.update(overrides)
    # Preserve key order in JSON responses
    app.config['JSON_SORT_KEYS'] = False
    app.json.sort_keys = False

    # Middleware
    app.wsgi_app = ProxyFix(app.wsgi_app, x_proto=1, x_host=1)

    # Enable CORS for frontend integration
    CORS(app, origins=["*"], methods=["GET", "POST", "OPTIONS"])

    # Log important configuration at startup
    logger = logging.getLogger(__name__)
    logger.info("=" * 50)
    logger.info("Experiment API Configuration:")
    logger.info(f"RESULTS_DIR: {app.config.get('RESULTS_DIR')}")
    logger.info(f"LOG_LEVEL: {app.config.get('LOG_LEVEL')}")
    logger.info("=" * 50)

    # Register blueprints
    app.register_blueprint(experiment_bp, url_prefix='/api/experiments')

    # Register error handlers
    register_error_handlers(app)

    @app.route('/health')
    def health_check():
        """Health check endpoint"""
        return {
            "status": "healthy",
            "service": "dimml experiment API",
            "version": "1.0.0"
        }

    return app


# Create app instance
app = create_app()

if __name__ == '__main__':
    app.run(host=Config.API_HOST, port=Config.API_PORT, debug=False)
