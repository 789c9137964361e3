"""Foreground-attentive feature learning toolkit.

From-scratch dense-tensor network layers with hand-derived gradients, a
symmetric triplet loss with adaptive direction-control weights, locally
smoothed mask-reconstruction supervision, an SGD training loop, and
ranking evaluation (CMC / mAP). Everything runs on plain numpy float64
so every gradient can be checked against central finite differences.
"""

__version__ = "0.1.0"
