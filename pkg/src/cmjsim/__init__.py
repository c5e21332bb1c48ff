"""Interacting branching-forest simulation and its deterministic limit.

Forests of individuals reproducing at point-process ages, with newborns
thinned according to the current empirical age structure; the matching
non-linear renewal solver for the large-population limit; a shared-noise
coupling between the two with an explicit immigration-dominated error
process; and backward infection-chain analysis.  A config-driven CLI
(`cmjsim`) ties the pieces into reproducible experiments.
"""

__version__ = "0.1.0"

from .ancestry import (
    ChainSample,
    EmpiricalChains,
    chain_density,
    empirical_chain_measure,
    kernel_density,
    kernel_normalization,
    sample_chain,
)
from .coupling import (
    CoupledResult,
    CouplingLabel,
    DominationReport,
    assign_offspring_label,
    check_domination,
    simulate_coupled,
)
from .errors import (
    AbsorbingStateError,
    CmjError,
    ConfigError,
    ContractError,
    EventCapError,
    PicardDivergenceError,
)
from .forest import Forest, birth_chain, local_distance, read_forest, truncate, write_forest
from .immigration import (
    ImmigrationResult,
    TailEstimate,
    chain_bound,
    estimate_tail,
    simulate_dominating_chain,
    simulate_immigration,
    wilson_interval,
)
from .interacting import (
    AgeMeasurePath,
    InteractionRule,
    age_measure_at,
    constant_rule,
    custom_rule,
    immunity_rule,
    lockdown_rule,
    simulate_interacting,
)
from .measures import (
    EmpiricalAgeMeasure,
    GriddedDensity,
    histogram,
    integrate,
    prohorov_upper,
)
from .nonlinear import (
    AgeDensityEstimate,
    estimate_mean_age_densities,
    expected_bin_masses,
    simulate_nonlinear_tree,
)
from .pde import (
    PdeSolution,
    age_snapshot,
    check_growth_bound,
    eval_u,
    eval_u_values,
    mass,
    residual,
    solve_nonlinear,
)
from .point_process import (
    BirthProcessSpec,
    FiniteAtoms,
    InitialAgeDensity,
    InterArrival,
    PoissonIntensity,
    RateDensity,
    Renewal,
    censor_initial_atoms,
    constant_intensity,
    expdecay_intensity,
    exponential_ages,
    exponential_interarrival,
    fixed_interarrival,
    initial_pair,
    sample_atoms,
    table_ages,
    table_intensity,
    uniform_ages,
    uniform_interarrival,
)
from ._rng import Stream, master_hash, replicate_seed
