from .config import AdamConfig, ModelConfig, placement_mask
from .data import GmmTask
from .layer import ExpertFfn, MoeLayer, aux_load_balance_loss
from .model import ForwardResult, MoeModel
from .optim import Adam
