"""Late-interaction retrieval with attention-guided local alignment.

Modules: ``core`` (domain types, validation, seeded RNG), ``late_interaction``
(MaxSim scoring and retrieval), ``attention`` (aggregation, PMI refinement,
downsampling), ``objectives`` (losses and gradient checks), ``trainer``,
``evaluation``, ``storage`` and ``dataset`` (file formats), ``cli``.
"""

from .attention import RefinementConfig, aggregate_layers, downsample, refine_pmi, synthesize_attention
from .core import (
    AnnotationSet,
    AttentionMap,
    Box,
    EmbeddingMatrix,
    Kind,
    LayerAttentionStack,
    MatchKind,
    PatchGrid,
    Provenance,
    ValidationError,
    validate,
)
from .evaluation import Qrels, RunFile, annotation_iou, coverage_at_kpercent, ndcg_at_k
from .late_interaction import PageIndex, maxsim_score, patch_similarity, retrieve, similarity_map
from .objectives import LocalLossKind, global_loss, gradcheck, local_loss, total_loss
from .trainer import ProjectionHead, TrainConfig, select_supervised, train

__version__ = "0.1.0"
