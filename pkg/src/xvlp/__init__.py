"""Bilingual vision-language pretraining testbed on a numpy tensor engine."""

__version__ = "0.1.0"

from .losses import (LAMBDA_DEFAULT, TEMP_DEFAULT, ctr_loss, ctr_tf_loss,
                     ctr_tt_loss, cvl_loss, mlm_loss, ssv_loss, total_loss)
from .numeric import Tensor, backward, grad_check
from .synth import make_dataset, read_dataset, write_dataset

__all__ = [
    "__version__",
    "Tensor", "backward", "grad_check",
    "cvl_loss", "ssv_loss", "ctr_loss", "ctr_tf_loss", "ctr_tt_loss",
    "mlm_loss", "total_loss", "TEMP_DEFAULT", "LAMBDA_DEFAULT",
    "make_dataset", "write_dataset", "read_dataset",
]
