import os
import logging

from dotenv import load_dotenv

load_dotenv()


class Config:
    """Process-level configuration read from the environment"""

    # Results: the only experiment-affecting environment override
    RESULTS_DIR = os.environ.get('DIMML_RESULTS_DIR', 'results')

    # Logging
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_FILE = os.environ.get('LOG_FILE', 'dimml.log')

    # HTTP surface
    API_HOST = os.environ.get('API_HOST', '127.0.0.1')
    API_PORT = int(os.environ.get('API_PORT', '5000'))


def configure_logging(level: str = None) -> None:
    """Configure root logging once for the CLI and the HTTP app"""
    logging.basicConfig(
        level=getattr(logging, (level or Config.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(Config.LOG_FILE),
            logging.StreamHandler()
        ]
    )
