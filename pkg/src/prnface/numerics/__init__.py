"""Dense-array numerics: kernels, a reverse-mode tape, layers, SGD, gradient checks, checkpoints."""
from . import checkpoint, functional
from .functional import (
    LstmState, affine_backward, affine_forward, batch_norm_backward, batch_norm_forward,
    conv2d_backward, conv2d_forward, lstm_cell_backward, lstm_cell_forward, lstm_cell_step,
    max_pool_backward, max_pool_forward, relu, relu_backward, relu_forward, softmax,
    softmax_cross_entropy,
)
from .gradcheck import check_parameters, grad_check, numerical_gradient, relative_error
from .layers import (
    LSTM, MLP, BatchNorm, Conv2d, DenseBlock, Linear, LSTMLayer, Module, Parameter,
)
from .optim import sgd_step
from .tensor import Tensor

