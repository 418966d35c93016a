"""Question-aware video frame selection toolkit.

Scores densely sampled candidate frames with a lightweight score-query
selector, picks informative frames via greedy non-maximum suppression, and
trains the selector from spatial+temporal pseudo-labels produced by
pluggable chat-model backends.
"""

__version__ = "0.1.0"

from .errors import (
    BackendError,
    ConfigError,
    DomainError,
    FrameSelectError,
    StoreError,
    TrainingError,
)
from .frames import (
    FramePlan,
    PatchEncoder,
    TokenGrid,
    VideoMeta,
    pad_to_multiple,
    plan_uniform,
    pool_tokens,
)
from .selection import (
    ImportanceVector,
    SelectionResult,
    nms_greedy,
    random_k,
    suppression_gap,
    topk,
    uniform_k,
)
from .selector import (
    ForwardTrace,
    LoraAdapters,
    SelectorConfig,
    backward,
    forward,
    init_lora,
    init_params,
    select_trainables,
)
from .tokenizer import QuestionTokens, tokenize_question
