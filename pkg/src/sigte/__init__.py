"""sigte: a transformer encoder whose attention sub-layer feeds attended
sequences through a differentiable truncated path-signature transform,
plus multi-task prediction heads and a cross-validation training harness.

Built on numpy float64 throughout, with a minimal reverse-mode autodiff
tape so the whole model trains end to end, signatures included.
"""

from .autodiff import Tensor, Tape, backward_pass, adam_step, AdamState
from .signature import (
    TruncatedSignature,
    chen_product,
    sig_dim,
    signature,
    segment_signature,
    stream_signature,
    signature_backward,
    path_signature,
)

__version__ = "0.1.0"
