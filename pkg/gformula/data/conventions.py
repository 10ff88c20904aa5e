"""Column naming conventions and the notes written into result metadata"""

LAG_PREFIX = "lag"
CUMAVG_PREFIX = "cumavg"
LAG_CUMAVG_PREFIX = "lag_cumavg"
RESERVED_HISTORY_PREFIXES = (LAG_CUMAVG_PREFIX, CUMAVG_PREFIX, LAG_PREFIX)

NATURAL_PREFIX = "natural_"

P_HAT = "p_hat"
Q_HAT = "q_hat"
MU_HAT = "mu_hat"
SIM_ID = "v"

NATURAL_COURSE_LABEL = "Natural course"
MISSING_TOKENS = ("", "NA")

CONVENTION_NOTES = {
    "risk_estimator": (
        "risk(t) = mean over trajectories of sum_k p_k (1 - q_k) prod_{j<k} (1 - p_j)(1 - q_j), "
        "q_k the competing-event hazard for interval k+1"
    ),
    "normalizer": "1/s with s the number of simulated trajectories",
    "percentile_ci": "nearest-rank order statistics: ceil(0.025 B)-th and ceil(0.975 B)-th replicate values",
    "bootstrap_se": "sample standard deviation (ddof=1) across successful replicates",
    "random_streams": (
        "SeedSequence(seed, spawn_key=(replicate, purpose, chunk)); interventions share streams "
        "(common random numbers); independent of worker count"
    ),
    "truncated_normal_sigma": "simulation draws use the maximum-likelihood sigma",
    "hazard_ratio": (
        "one event-time realization per trajectory from predicted hazards, pooled logistic "
        "event ~ group + factor(time); competing failures stay in later risk sets (subdistribution)"
    ),
    "dispersion": "residual mean squared error uses the n - p denominator",
}
