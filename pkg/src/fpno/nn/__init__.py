"""Dense networks with manual backpropagation and the fixed-point neural operator."""

from .fpno import FPNO, FpnoNetwork, fpno_apply, paper_architecture
from .layers import Dense, ResBlock, SEResBlock, Sequential, gelu, resnet
from .mionet import MioNet
from .optim import AdamW, EarlyStopping, rel_mse_loss, relative_l2

__all__ = ["FPNO", "FpnoNetwork", "fpno_apply", "paper_architecture", "Dense", "ResBlock",
           "SEResBlock", "Sequential", "gelu", "resnet", "MioNet", "AdamW", "EarlyStopping",
           "rel_mse_loss", "relative_l2"]
