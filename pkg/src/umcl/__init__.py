"""Image-text-label contrastive training with continuous prompts, at desk scale."""

from .data import (Batch, BatchSampler, Dataset, EvalSet, Sample, SamplingPolicy, Source,
                   SynthConfig, generate_synthetic, load_dataset, load_eval_set, write_dataset)
from .encoders import DualEncoder, ParameterStore, encode_image, encode_text
from .objective import (gradcheck, hard_infonce_objective, label_targets, normalize_similarity,
                        pair_targets, raw_similarity, umcl_loss, umcl_objective)
from .prompt import (PromptBuilder, TemplateRegistry, Vocabulary, assemble_prompt,
                     builtin_registry, class_prompt_set, tokenize)
from .training import Checkpoint, TrainConfig, adam_step, load_checkpoint, lr_at, \
    save_checkpoint, train

__version__ = "0.1.0"
