"""Desk-scale masked-LM pretraining lab.

A plain-numpy BERT-style encoder pretrainer plus a pretraining-only decoder
with gradually-unmasked attention keys and stochastic encoder/decoder output
mixing.  The decoder is dropped at export, so finetuning cost and graph shape
match the plain encoder exactly.
"""
from .config import Config, ConfigError, ModelConfig, TrainConfig, load_config, \
    parse_config_text, canonical_text
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import MaskedBatch, MaskedSequence, MaskingPolicy, Vocab, \
    apply_mlm_masking, build_vocab, encode_line, make_base_key_block, \
    BatchStream, mask_stats
from .decoder import UnmaskPlan, decoder_forward, mix_outputs, mlm_head, \
    plan_unmasking, pretrain_forward_loss
from .flops import FlopsReport, flops_estimate
from .model import embed, encoder_forward, multi_head_attention, transformer_block
from .rng import RngHub
from .tensor import GradGraph, GraphError, ParamStore, Tensor, finite_diff_check
from .train import FinetuneTask, TrainState, adam_step, evaluate_cloze, \
    export_encoder, finetune_classify, init_params, lr_schedule, pretrain

__version__ = "0.1.0"
