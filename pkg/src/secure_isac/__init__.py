"""Two-phase secure ISAC resource allocation.

Phase one shapes a sensing covariance that minimizes the worst-case CRLB of
the eavesdropper's angle estimate; phase two finds globally optimal secure
beamformers plus artificial-noise covariance via polyblock outer approximation
over SDP feasibility oracles; an outer line search allocates slot time between
the phases.
"""

from .model import (
    BeamPattern,
    ChannelRealization,
    ScenarioConfig,
    UncertaintyBox,
    eve_channel,
    ideal_beam_pattern,
    sample_realization,
    sector_grid,
    steering_taylor,
    steering_vector,
    target_response,
)

__all__ = [
    "BeamPattern",
    "ChannelRealization",
    "ScenarioConfig",
    "UncertaintyBox",
    "eve_channel",
    "ideal_beam_pattern",
    "sample_realization",
    "sector_grid",
    "steering_taylor",
    "steering_vector",
    "target_response",
]

__version__ = "0.1.0"
