"""Quantization-based approximate Kalman-Bucy filtering for semi-Markov
jump linear systems: model presets, sojourn-time codebook training, branch
pre-computation, online filters and Monte Carlo comparison harness."""

from .model import (
    Mode,
    SMJLSModel,
    SojournDistribution,
    ValidationReport,
    from_rate_matrix,
    maglev_preset,
    model_from_dict,
    model_hash,
    model_to_dict,
    validate,
)
from .semimarkov import Trajectory, derive_rng, mode_at, sample_trajectory
from .quantizer import (
    QuantizationGrid,
    clvq_train,
    distortion_estimate,
    lloyd_refine,
    load_grid,
    project,
    rate_diagnostic,
    save_grid,
)
from .riccati import (
    BranchTree,
    LipschitzDiagnostic,
    RiccatiBlowupError,
    RiccatiPath,
    build_branch_tree,
    count_branches,
    empirical_lipschitz,
    integrate_phi,
    load_tree,
    riccati_rhs,
    save_tree,
    used_points,
)
from .filters import (
    FilterRun,
    MarkovAux,
    NoiseRealization,
    kbf_gain,
    markov_pi,
    run_kbf,
    run_lmmse,
    run_quantized,
    sample_noise,
    simulate_truth,
)

__version__ = "0.1.0"
