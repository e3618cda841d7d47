"""Differential attention inside a toy PaliGemma-style vision-language model.

numpy reverse-mode autodiff, three attention variants, LoRA adapters,
prefix-LM training, and VQAv2 / needle-in-a-haystack evaluation.
"""
from .attention import Variant, compute_lambda, lambda_init_schedule, multi_head
from .model import ModelConfig, ToyVLM
from .tensor import Tensor, grad_check

__all__ = ["Tensor", "grad_check", "Variant", "compute_lambda", "lambda_init_schedule",
           "multi_head", "ModelConfig", "ToyVLM"]
__version__ = "0.1.0"
