"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_feature_map(x, name="X"):
    """Return ``x`` as a finite float64 ``(N, C, H, W)`` array.

    A single ``(C, H, W)`` map gets a leading batch axis.
    """
    x = check_array(x, dtype=np.float64, ensure_2d=False, allow_nd=True, input_name=name,
                    ensure_min_samples=1, ensure_min_features=1)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"{name} must be (N, C, H, W) or (C, H, W), got shape {x.shape}")
    return x


def check_pair(X):
    """Split ``X`` into ``(x_rgb, x_ir)``.

    ``X`` is either a pair of equally shaped feature maps, or one array whose
    channel axis stacks RGB channels first and IR channels second.
    """
    if isinstance(X, (tuple, list)):
        if len(X) != 2:
            raise ValueError(f"expected an (rgb, ir) pair, got {len(X)} arrays")
        x_rgb = check_feature_map(X[0], "x_rgb")
        x_ir = check_feature_map(X[1], "x_ir")
    else:
        stacked = check_feature_map(X, "X")
        if stacked.shape[1] % 2:
            raise ValueError(f"stacked input needs an even channel count, got {stacked.shape[1]}")
        half = stacked.shape[1] // 2
        x_rgb, x_ir = stacked[:, :half], stacked[:, half:]
    if x_rgb.shape != x_ir.shape:
        raise ValueError(f"RGB and IR shapes differ: {x_rgb.shape} vs {x_ir.shape}")
    return x_rgb, x_ir
