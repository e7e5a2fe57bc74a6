"""Kernel dispatch: re-export the backend selected by ``DPAUDIT_BACKEND``."""

from ._backend import BACKEND

if BACKEND == "numba":
    from . import _kernels_numba as impl
else:
    from . import _kernels_numpy as impl

ACT_RELU = impl.ACT_RELU
ACT_TANH = impl.ACT_TANH

logreg_logits = impl.logreg_logits
logreg_loss = impl.logreg_loss
logreg_grads = impl.logreg_grads
logreg_grad_input = impl.logreg_grad_input
logreg_clipped_grad_sum = impl.logreg_clipped_grad_sum
logreg_reverse_step = impl.logreg_reverse_step

mlp_logits = impl.mlp_logits
mlp_loss = impl.mlp_loss
mlp_grads = impl.mlp_grads
mlp_grad_input = impl.mlp_grad_input
mlp_clipped_grad_sum = impl.mlp_clipped_grad_sum
mlp_reverse_step = impl.mlp_reverse_step
