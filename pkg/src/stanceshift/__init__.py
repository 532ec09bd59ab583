"""Cross-domain, cross-target stance detection at desk scale.

The pipeline: n-gram domain-affinity masking corrupts source-domain text, a
backoff-trigram infiller reconstructs it toward the target domain, and the
stance classifier trains on originals plus counterfactuals under a combined
similarity-weighted contrastive + cross-entropy objective.
"""

from .affinity import (
    DomainMasker,
    MaskedText,
    NgramTable,
    Slot,
    build_table,
    corrupt,
    corrupt_by_affinity,
    restore_tokens,
    score_rows,
)
from .corpus import (
    AGAINST,
    FAVOR,
    NONE,
    Corpus,
    Example,
    SplitSpec,
    SynthConfig,
    content_fingerprint,
    load_jsonl,
    make_split,
    normalize_text,
    synth_benchmark,
    write_jsonl,
)
from .encoder import (
    FeatureVector,
    ModelState,
    encode,
    featurize,
    forward_batch,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from .encoder import classify
from .evaluation import (
    EvalReport,
    accuracy,
    auc,
    degradation,
    evaluate_model,
    mcnemar,
    run_ablations,
    run_sweeps,
)
from .objective import (
    ContrastiveBatch,
    ContrastiveSampler,
    LossConfig,
    cd_sampler,
    contrastive_loss,
    cross_entropy,
    total_loss,
    triplet_loss,
)
from .reconstructor import (
    CounterfactualAugmenter,
    Generator,
    GeneratorSpec,
    InfillerModel,
    Orientation,
    build_orientation,
    counterfactual_pass,
    train_infiller,
)
from .trainer import (
    CounterfactualConfig,
    EncoderConfig,
    OptimizerConfig,
    Predictions,
    RunManifest,
    StanceClassifier,
    TrainConfig,
    predict,
    train,
)
from .util import DivergenceError, ValidationError

__version__ = "0.1.0"
