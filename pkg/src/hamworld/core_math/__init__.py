from . import autograd as ag
from .autograd import (GradTape, TapeError, Var, backward, clip_by_global_norm,
                       global_norm, value)
from .optim import AdamW
from .nn import MlpParams, mlp_apply, mlp_init, mlp_value_and_input_grad
from .tree import tree_copy, tree_dict, tree_from_dict, tree_items, tree_map
from .twohot import (TwoHotCodec, decode_logits, softmax, symexp, symlog,
                     twohot_decode, twohot_encode)

__all__ = [
    "ag", "AdamW", "GradTape", "TapeError", "Var", "backward", "clip_by_global_norm",
    "global_norm", "value", "MlpParams", "mlp_apply", "mlp_init",
    "mlp_value_and_input_grad", "tree_copy", "tree_dict", "tree_from_dict",
    "tree_items", "tree_map", "TwoHotCodec", "decode_logits", "softmax",
    "symexp", "symlog", "twohot_decode", "twohot_encode",
]
