"""2D diffeomorphic deformation fields: group operations, principal
logarithms (optimization-based and learned), and log-Euclidean statistics."""

from .fields import (
    DeformationField,
    Grid2,
    GridMismatchError,
    VectorField,
    compose,
    field_rms,
    grid_coords,
    inverse_consistency_residual,
    jacobian_det,
    jacobian_logdet,
    make_identity,
    negate,
    rel_l2,
    sample_displacement,
    self_compose,
    warp_image,
)
from .groupmaps import (
    ExpConfig,
    IssConfig,
    NegationReport,
    NonConvergenceWarning,
    exp_ode_oracle,
    exp_scaling_squaring,
    iss_log,
    iss_roots,
    sqrt_field,
    validate_log_negation,
)
from .model import (
    ModelConfig,
    ModelParams,
    TrainingDivergedError,
    decode_root,
    encode,
    evaluate,
    infer_log,
    init_params,
    loss_inv,
    loss_linv,
    loss_rec,
    timing_comparison,
    total_loss,
    train,
)
from .stats import (
    PcaModel,
    RegressionModel,
    latent_walk,
    log_euclidean_mean,
    ols_fit,
    pca_fit,
    pca_project,
    pca_reconstruct,
    pearson_r,
    top_regression_directions,
)
from .synth import SynthConfig, SynthPair, gen_dataset, gen_synthetic_pair

__all__ = [name for name in dir() if not name.startswith("_")]
