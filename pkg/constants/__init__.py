# Constants package