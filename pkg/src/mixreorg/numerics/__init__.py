from .tensor import (
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    clamp_min,
    concat,
    default_dtype,
    detach,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    reshape,
    set_default_dtype,
    sqrt,
    stack,
    tanh,
    transpose,
    tsum,
)
from .functional import (
    cross_entropy,
    embed_lookup,
    gather_positions,
    gelu,
    gumbel_softmax_st,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    logsumexp,
    one_hot,
    softmax,
)
from .gradcheck import GradCheckReport, grad_check, numerical_grad, relative_error
from . import rng
