"""CASTLE attention: recurrent, parallel and blockwise forms, with UQ-KV cache decoding."""

from castle.blockwise import (
    BlockConfig,
    SavedForBackward,
    backward_blockwise,
    forward_blockwise,
    su_diag_block,
    su_offdiag_block,
    update_d,
)
from castle.infer import UQKVCache, decode_step, prefill, update_u_recursive
from castle.masks import MaskKind, build_mc, build_mc_tilde, build_mu, build_mu_column
from castle.multihead import Arch, MultiHeadParams, multihead_decode_step, multihead_forward, param_count
from castle.num import (
    ContractError,
    FlopCounter,
    Rng,
    masked_sigmoid,
    matmul,
    row_softmax_stable,
    silu,
    silu_grad,
)
from castle.parallel import (
    compute_su_naive,
    parallel_backward_reference,
    parallel_forward,
    standard_causal_forward,
)
from castle.projections import Grads, HeadParams, ProjectedSeq, project
from castle.recurrent import lookahead_keys_direct, recurrent_full, recurrent_step

__version__ = "0.1.0"
