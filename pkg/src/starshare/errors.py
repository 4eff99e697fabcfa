"""Error taxonomy. Exit codes: config 2, data 3, internal invariant 4."""


class StarshareError(Exception):
    exit_code = 1


class ConfigError(StarshareError):
    """Bad flags, bad workload file, unsatisfiable settings."""

    exit_code = 2


class DataError(StarshareError):
    """Malformed snapshots, schema mismatches, missing artifacts."""

    exit_code = 3


class InternalError(StarshareError):
    """An invariant the engine promised to uphold was violated."""

    exit_code = 4
