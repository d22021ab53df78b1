"""scikit-learn style wrapper around one fusion block."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from c2former.block import (BlockConfig, block_forward, check_inputs, fuse_streams, init_params,
                            parameter_count)
from c2former.afs import afs_sample, make_reference_grid, predict_offsets
from c2former.ica import make_descriptors, similarity_matrices
from c2former.validation import check_pair


class C2FormerBlock(TransformerMixin, BaseEstimator):
    """Cross-modal fusion block for paired RGB / IR feature maps.

    ``X`` is either an ``(x_rgb, x_ir)`` pair or a single ``(N, 2C, H, W)``
    array with RGB channels first.  ``fit`` does no training: it reads the
    feature shape and draws seeded parameters.  ``transform`` returns both
    enhanced streams stacked the same way, ``(N, 2C, H, W)``.

    Parameters
    ----------
    stride : int, default=3
        Sampling stride of the offset-guided downsampling.
    seed : int, default=0
        Seed of the parameter initialization.
    bias_enabled : bool, default=True
        Whether every convolution carries a (zero-initialized) bias.
    """

    def __init__(self, stride=3, seed=0, bias_enabled=True):
        self.stride = stride
        self.seed = seed
        self.bias_enabled = bias_enabled

    def fit(self, X, y=None):
        x_rgb, _ = check_pair(X)
        _, C, H, W = x_rgb.shape
        self.config_ = BlockConfig(C, H, W, self.stride, self.seed, self.bias_enabled)
        self.params_ = init_params(self.config_)
        self.n_params_ = parameter_count(self.config_)
        return self

    def _pair(self, X):
        check_is_fitted(self, "params_")
        x_rgb, x_ir = check_pair(X)
        check_inputs(x_rgb, x_ir, self.config_)
        return x_rgb, x_ir

    def forward(self, X):
        """Return ``(out_rgb, out_ir)``, each shaped like one input stream."""
        x_rgb, x_ir = self._pair(X)
        return block_forward(x_rgb, x_ir, self.params_, self.config_)

    def transform(self, X):
        return np.concatenate(self.forward(X), axis=1)

    def fuse(self, X):
        """Sum of the two enhanced streams, ``(N, C, H, W)``."""
        return fuse_streams(*self.forward(X))

    def attention(self, X):
        """Similarity matrices ``(m_rgb, m_ir)``, each ``(N, Hs*Ws, Hs*Ws)``."""
        x_rgb, x_ir = self._pair(X)
        cfg = self.config_
        grid = make_reference_grid(cfg.height, cfg.width, cfg.stride)
        dp = predict_offsets(x_rgb, x_ir, self.params_.afs, cfg.stride)
        sampled = afs_sample(x_rgb, x_ir, grid, dp)
        return similarity_matrices(make_descriptors(*sampled, self.params_.ica))
