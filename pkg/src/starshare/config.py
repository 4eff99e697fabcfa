"""Engine configuration with environment overrides.

Every knob has a default matching the documented desk-scale setup.  Environment
variables named STARSHARE_<FIELD> (upper-cased field name) override defaults;
command-line flags override both.
"""

from __future__ import annotations

import dataclasses
import os

from .errors import ConfigError

ENV_PREFIX = "STARSHARE_"


@dataclasses.dataclass
class EngineConfig:
    seed: int = 42
    max_queries: int = 512          # width of query-set bit vectors
    ps_min: int = 1 << 16           # minimum estimated rows per partition
    sample_rate: float = 0.01       # tuning sample fraction
    block_min_avg: int = 256        # minimum average rows per block
    vector_size: int = 1024         # engine chunk size within a block
    improvement_factor: float = 1.01  # required homogeneity gain per split
    c_scan: float = 1.0             # per-tuple cost constants
    c_filter: float = 2.0
    c_probe: float = 10.0
    c_agg: float = 2.0
    c_view_filter: float = 139.45   # per tuple per runtime filter on a view
    filter_cost_exponent: float = 1.0
    antichain_cap: int = 4          # max nodes per enumerated cut
    component_cut_cap: int = 512    # max cuts enumerated per graph component
    isk_prefix_size: int = 3
    isk_iteration_cap: int = 10
    isk_candidate_cap: int = 48     # prefix pool size before combinatorics
    budget_slack: float = 1.1       # tolerated actual/planned view size ratio
    threads: int = 0                # 0 means os.cpu_count()
    skip_enabled: bool = True       # zone-map data/filter skipping
    reuse_mode: str = "cost"        # cost | eager | off
    partition_enabled: bool = True
    view_skip_enabled: bool = True  # access methods on materialized views

    def __post_init__(self) -> None:
        if self.reuse_mode not in ("cost", "eager", "off"):
            raise ConfigError("reuse_mode must be cost, eager or off, got %r" % self.reuse_mode)
        if not 0.0 < self.sample_rate <= 1.0:
            raise ConfigError("sample_rate must be in (0, 1], got %r" % self.sample_rate)
        if self.max_queries < 1 or self.max_queries % 64:
            raise ConfigError("max_queries must be a positive multiple of 64")
        if self.ps_min < 1 or self.block_min_avg < 1 or self.vector_size < 1:
            raise ConfigError("ps_min, block_min_avg and vector_size must be positive")
        if self.isk_prefix_size < 0 or self.isk_candidate_cap < 1:
            raise ConfigError("isk_prefix_size must be >= 0 and isk_candidate_cap positive")

    def worker_count(self, n_tasks: int) -> int:
        limit = self.threads if self.threads > 0 else (os.cpu_count() or 1)
        return max(1, min(limit, n_tasks))


def config_from_env(base: EngineConfig | None = None) -> EngineConfig:
    """Apply STARSHARE_* environment overrides on top of *base*."""
    values = dataclasses.asdict(base) if base is not None else {}
    cfg = EngineConfig(**values) if values else EngineConfig()
    updates = {}
    for field in dataclasses.fields(EngineConfig):
        raw = os.environ.get(ENV_PREFIX + field.name.upper())
        if raw is None:
            continue
        try:
            if field.type == "bool":
                updates[field.name] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif field.type == "int":
                updates[field.name] = int(raw)
            elif field.type == "float":
                updates[field.name] = float(raw)
            else:
                updates[field.name] = raw
        except ValueError as exc:
            raise ConfigError("bad value for %s%s: %r" % (ENV_PREFIX, field.name.upper(), raw)) from exc
    return dataclasses.replace(cfg, **updates) if updates else cfg
