"""Calibrated cross-modal fusion block for paired RGB / infrared feature maps."""
from c2former.afs import AfsParams, afs_sample, make_reference_grid, predict_offsets
from c2former.analysis import (CalibScenario, FlopsReport, RecoveryReport, count_flops,
                               eval_alignment_recovery, gen_scenario)
from c2former.autodiff import Tape, finite_diff_oracle, gradcheck_report
from c2former.block import (BlockConfig, BlockParams, block_forward, fuse_streams, init_params,
                            multi_stage_apply, parameter_count)
from c2former.estimator import C2FormerBlock
from c2former.ica import (IcaParams, StreamParams, cross_similarity, ica_forward, make_descriptors,
                          soft_attention)
from c2former.modnorm import ModNormParams, modality_normalize
from c2former.tensor_core import ConvParams

__version__ = "0.1.0"

__all__ = [
    "AfsParams", "BlockConfig", "BlockParams", "C2FormerBlock", "CalibScenario", "ConvParams",
    "FlopsReport", "IcaParams", "ModNormParams", "RecoveryReport", "StreamParams", "Tape",
    "afs_sample", "block_forward", "count_flops", "cross_similarity", "eval_alignment_recovery",
    "finite_diff_oracle", "fuse_streams", "gen_scenario", "gradcheck_report", "ica_forward",
    "init_params", "make_descriptors", "make_reference_grid", "modality_normalize",
    "multi_stage_apply", "parameter_count", "predict_offsets", "soft_attention",
]
