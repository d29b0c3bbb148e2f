"""Caption generation and sentence-similarity scoring microservice."""

from .app import app, create_app
from .backends import StubBackend, TransformersBackend, backend_from_env

__version__ = "0.1.0"
