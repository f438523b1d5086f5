"""DECO: sparse mixture-of-experts with ReLU routing and NormSiLU experts, in numpy."""
from .config import LMConfig, MoEConfig, RunConfig, TrainConfig, desk_preset
from .lm import LanguageModel, build_model
from .moe import init_moe_block, moe_backward, moe_forward
from .regularization import RegulatorState, router_entropy, update_lambda
from .routing import route

__version__ = "0.1.0"
