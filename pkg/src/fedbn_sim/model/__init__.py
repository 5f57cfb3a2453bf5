from .checkpoint import load_params, params_from_dict, params_to_dict, save_params
from .mlp import (
    CROSS_ENTROPY,
    EVAL,
    SQUARED,
    TRAIN,
    BatchNorm,
    Dense,
    MlpGrads,
    MlpParams,
    init_mlp,
    loss_and_dlogits,
    mlp_backward,
    mlp_forward,
    predict_labels,
    recompute_running_stats,
    update_running_stats,
)
from .theory import (
    TheoryGrads,
    TheoryParams,
    init_theory,
    projected_features,
    s_norms,
    theory_forward,
    theory_grads,
    theory_predict,
    weighted_grads,
)
from .toy import ToyModel, toy_mse, toy_mse_surface
