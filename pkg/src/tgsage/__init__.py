"""Teacher-guided architecture search at desk scale.

Candidates are scored by premature validation accuracy plus the similarity of
their representational dissimilarity matrices to those of a fixed teacher, and
that score drives TPE, an LSTM policy-gradient controller or random search.
"""

from .rsa import (
    ActivationMatrix,
    GuidanceScore,
    Rdm,
    TeacherSpec,
    combined_score,
    compute_category_rdm,
    compute_rdm,
    rdm_similarity,
    score_candidate,
    tg_score,
)
from .space import (
    CellGenome,
    CellSpace,
    LayeredCnnGenome,
    LayeredSpace,
    MicroSpace,
    decode,
    encode,
    enumerate_space,
    sample_uniform,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationMatrix",
    "CellGenome",
    "CellSpace",
    "GuidanceScore",
    "LayeredCnnGenome",
    "LayeredSpace",
    "MicroSpace",
    "Rdm",
    "TeacherSpec",
    "combined_score",
    "compute_category_rdm",
    "compute_rdm",
    "decode",
    "encode",
    "enumerate_space",
    "rdm_similarity",
    "sample_uniform",
    "score_candidate",
    "tg_score",
    "validate",
    "__version__",
]
