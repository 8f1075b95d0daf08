"""Continual-learning laboratory for synthetic multi-center segmentation.

The heavy lifting lives in the compiled ``contseg._core`` extension; this
package re-exports its public surface.
"""

from contseg._core import (
    Domain,
    DomainSpec,
    Mixing,
    Model,
    ModelConfig,
    Polarity,
    Regime,
    RegimeConfig,
    Sample,
    compute_bwt,
    default_cohort,
    desk_cohort,
    dice_loss,
    dice_score,
    generate_domain,
    lr_schedule,
    run_regime,
)

__all__ = [
    "Domain",
    "DomainSpec",
    "Mixing",
    "Model",
    "ModelConfig",
    "Polarity",
    "Regime",
    "RegimeConfig",
    "Sample",
    "compute_bwt",
    "default_cohort",
    "desk_cohort",
    "dice_loss",
    "dice_score",
    "generate_domain",
    "lr_schedule",
    "run_regime",
]
