"""Stage-wise attention-guided adversarial attacks on vision-language models.

The pipeline: extract a spatial attention map from a captioning model,
schedule progressively larger high-attention windows across stages, run
budgeted L-infinity ascent against a surrogate encoder ensemble inside
those windows, then analyze and evaluate the results.
"""

from .attack import AttackConfig, AttackResult, ImagePair, Perturbation, run_attack
from .attention import (
    AttentionMap,
    AttentionMapCache,
    ExtractorProfile,
    SyntheticExtractor,
    TokenAttentionTrace,
    extract_attention_map,
    make_extractor,
)
from .config import RunConfig
from .hotspots import (
    Hotspot,
    Region,
    StageSchedule,
    build_schedule,
    select_coldspots,
    select_hotspots,
)
from .metrics import (
    budget_saturation,
    imperceptibility,
    js_divergence,
    partition_regions,
    pearson,
    spearman,
)
from .studies import correlation_study, redistribution_study
from .surrogates import (
    SurrogateEnsemble,
    default_stub_ensemble,
    loss_and_gradient,
    make_stub_encoder,
    surrogate_loss,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttentionMap",
    "AttentionMapCache",
    "ExtractorProfile",
    "Hotspot",
    "ImagePair",
    "Perturbation",
    "Region",
    "RunConfig",
    "StageSchedule",
    "SurrogateEnsemble",
    "SyntheticExtractor",
    "TokenAttentionTrace",
    "budget_saturation",
    "build_schedule",
    "correlation_study",
    "default_stub_ensemble",
    "extract_attention_map",
    "imperceptibility",
    "js_divergence",
    "loss_and_gradient",
    "make_extractor",
    "make_stub_encoder",
    "partition_regions",
    "pearson",
    "redistribution_study",
    "run_attack",
    "select_coldspots",
    "select_hotspots",
    "spearman",
    "surrogate_loss",
    "__version__",
]
