from . import health, query, users  # noqa: F401
