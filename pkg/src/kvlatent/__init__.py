"""kvlatent: dual-model latent reasoning over an augmented KV cache.

A small decoding transformer (the base) pauses at chosen sites in its
input; a second transformer (the coprocessor) reads the base's per-layer
KV cache and emits a burst of latent vectors at each site; the base then
resumes decoding with those latents injected, either as input embeddings
or as extra cache rows. The whole schedule costs three full forward
passes regardless of how many latents are emitted, versus N_L + 1 passes
for emitting them one at a time.

Everything runs on numpy with a from-scratch reverse-mode autodiff; the
package trains end to end on a single CPU core.
"""

from .engine import (DUAL_MODES, TRAINING_MODES, InjectionMode, LatentBlock,
                     PassCounter, SoftTokenBank, base_prefix_pass,
                     base_trainable, coprocessor_pass, decode_pass,
                     effective_context, generate_greedy, has_coprocessor,
                     rollout_speedup, sequential_rollout, soft_embedding_pass,
                     uses_cache_concat)
from .errors import (ContractError, DataFormatError, GenerationError,
                     NumericError, ShapeError)
from .masks import (AugmentationPlan, build_attention_mask, causal_mask,
                    decode_mask_cache_concat)
from .model import ModelCache, ModelConfig, ModelParams, forward, param_names
from .training import (CurriculumConfig, LatentSystem, OptimizerState,
                       ScheduleConfig, SequenceItem, adamw_step,
                       build_finetune_item, curriculum_finetune,
                       evaluate_perplexity, flat_finetune, init_system,
                       lr_at, pretrain, pretrain_items, run_three_pass,
                       select_augmentation_sites, train_step)

__version__ = "0.1.0"

__all__ = [
    "AugmentationPlan", "ContractError", "CurriculumConfig",
    "DataFormatError", "DUAL_MODES", "GenerationError", "InjectionMode",
    "LatentBlock", "LatentSystem", "ModelCache", "ModelConfig",
    "ModelParams", "NumericError", "OptimizerState", "PassCounter",
    "ScheduleConfig", "SequenceItem", "ShapeError", "SoftTokenBank",
    "TRAINING_MODES", "adamw_step", "base_prefix_pass", "base_trainable",
    "build_attention_mask", "build_finetune_item", "causal_mask",
    "coprocessor_pass", "curriculum_finetune", "decode_mask_cache_concat",
    "decode_pass", "effective_context", "evaluate_perplexity",
    "flat_finetune", "forward", "generate_greedy", "has_coprocessor",
    "init_system", "lr_at", "param_names", "pretrain", "pretrain_items",
    "rollout_speedup", "run_three_pass", "select_augmentation_sites",
    "sequential_rollout", "soft_embedding_pass", "train_step",
    "uses_cache_concat", "__version__",
]
