"""Cross-domain few-shot evaluation engine over precomputed embeddings."""

from .classifiers import (
    CosineHead,
    FeatureMatrix,
    LinearHead,
    TrainConfig,
    centroid_predict,
    fit_cosine,
    fit_linear,
    matching_predict,
    predict_cosine,
    predict_linear,
    softmax,
    transductive_standardize,
)
from .dataio import (
    DataFormatError,
    EmbeddingDataset,
    LayerKey,
    SyntheticLayer,
    SyntheticSpec,
    bayes_accuracy,
    generate_synthetic,
    global_average_pool,
    load_dataset,
    simplex_means,
    write_dataset,
)
from .evaluation import (
    ConfigError,
    EvalReport,
    MethodSpec,
    confidence_interval,
    format_report,
    run_evaluation,
    write_report,
)
from .ims import (
    CvConfig,
    ImsResult,
    LayerSelection,
    ModelLibrary,
    concat_features,
    cv_error,
    ims_classify,
    stage1_select,
    stage2_select,
)
from .sampler import (
    Episode,
    EpisodeConfig,
    InsufficientDataError,
    derive_episode_seed,
    sample_episode,
    splitmix64,
)

__version__ = "0.1.0"
