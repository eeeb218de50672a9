from .gradcheck import GradCheckReport, grad_check
from .layers import (
    add, bilstm_seq, concat, conv1d, conv1d_transpose, conv2d_same, dense, dropout,
    gru_seq, l1_loss, lstm_seq, maxpool2d, mean, mul, relu, reshape, softmax,
    softmax_xent, total, transpose,
)
from .optim import AdamConfig, adam_step
from .params import (
    BundleError, ByteCountError, ChecksumError, FormatVersionError, ParameterSet,
    ShapeMismatchError, glorot, load_params, make_rng, save_params,
)
from .tensor import NonFiniteError, Tensor
