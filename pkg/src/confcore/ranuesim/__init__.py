"""RAN and UE simulator driving load into the core."""

from .sim import (
    SeedMismatch,
    SessionMissing,
    SimUe,
    ThroughputRecord,
    UeState,
    UeTiming,
    generate_population,
    poisson_arrivals,
    read_population,
    register_ue,
    registration_storm,
    spawn_ues,
    traffic_session,
    write_population,
)

__all__ = [
    "SeedMismatch", "SessionMissing", "SimUe", "ThroughputRecord", "UeState", "UeTiming",
    "generate_population", "poisson_arrivals", "read_population", "register_ue",
    "registration_storm", "spawn_ues", "traffic_session", "write_population",
]
