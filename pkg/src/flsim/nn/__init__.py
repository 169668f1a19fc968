from flsim.nn.autodiff import GradientTape, Tensor
from flsim.nn.model import (
    BOS,
    EOS,
    PAD,
    BaseModel,
    ModelConfig,
    adapted_layer_names,
    backward,
    forward_lm,
    greedy_decode,
    init_base_model,
    logits_of,
    loss_next_token,
    parameter_shapes,
)
from flsim.nn.optim import OptimizerState, optimizer_step
