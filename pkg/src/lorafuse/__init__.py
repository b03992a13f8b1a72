"""Training-free fusion of subject-specific low-rank adapters in a toy
autoregressive image generator.

Each subject is tuned as an independent adapter on the cross-attention
K/V projections; at inference, adapters activate only on their subject's
prompt-token span, so several subjects compose in one prompt with no
re-tuning.
"""

from .adapters import (
    ActivePair,
    AdapterRegistry,
    LoraAdapter,
    RoutingMask,
    apply_lora_projection,
    build_routing_masks,
    init_adapter,
    load_adapter,
    save_adapter,
)
from .inference import GenerationResult, SamplerConfig, generate, sample_next
from .model import (
    ModelConfig,
    ModelWeights,
    backward_lora,
    cross_attention_kv,
    encode_prompt,
    forward_logits,
    gradient_check,
    init_model_weights,
    load_weights,
    save_weights,
    sequence_nll,
)
from .numerics import AdamState, GradTape, Tensor2, adam_step, finite_diff_grad
from .synthdata import (
    CorpusConfig,
    ReferenceSet,
    SceneSpec,
    Subject,
    build_pretrain_corpus,
    build_reference_set,
    make_canonical,
    make_subject,
    render_scene,
)
from .tokenizer import (
    PromptTokens,
    SubjectSpan,
    Vocabulary,
    detokenize,
    find_subject_spans,
    quantize_image,
    tokenize_prompt,
)
from .training import (
    PretrainConfig,
    TuneConfig,
    pretrain_base,
    tune_subject,
)

__version__ = "0.1.0"
