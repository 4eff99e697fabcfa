"""Batch query engine for star schemas.

Executes whole batches of select-project-join-aggregate queries through one
shared global plan, reorganizes the fact table around the observed workload,
and reuses materialized join results where the cost model says it pays off.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, InternalError

__all__ = ["ConfigError", "DataError", "InternalError", "__version__"]
