"""seqdeconf: deconfounding one-step-ahead treatment-response estimation
in longitudinal observational data.

The pipeline: simulate confounded trajectories (or load your own), fit a
sequential factor model that infers substitute confounders from the joint
treatment assignments, validate it with temporal predictive checks, and
compare IPTW outcome models (a linear marginal structural model and a
recurrent one) with and without the inferred substitutes.
"""

__version__ = "0.1.0"
