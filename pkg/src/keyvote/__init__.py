"""Key-based block-shuffle defense with a voting ensemble, attacks and harness."""

from .attacks import (
    ATTACK_KINDS,
    AttackBudget,
    AttackOutcome,
    NattackParams,
    SpsaParams,
    SquareParams,
    margin_loss,
    nattack,
    project_linf,
    run_attack_suite,
    spsa_attack,
    square_attack,
)
from .ensemble import (
    KeyedVotingEnsemble,
    MemberSpec,
    build_ensemble,
    load_manifest,
    majority_vote,
    oracle,
    predict_frontend,
    predict_label,
    save_manifest,
)
from .errors import DataError, TrainingDiverged
from .harness import (
    ExperimentConfig,
    LabeledDataset,
    MetricsReport,
    compute_asr,
    compute_clean_acc,
    load_config,
    load_dataset,
    make_synthetic_dataset,
    render_report,
    run_experiment,
    sample_correctly_classified,
    save_dataset,
)
from .keying import Permutation, SecretKey, generate_permutation, invert_permutation
from .nn import (
    Architecture,
    Model,
    TrainConfig,
    evaluate_accuracy,
    forward,
    forward_batch,
    init_model,
    load_model,
    save_model,
    train,
)
from .transform import (
    BlockGrid,
    BlockShuffler,
    block_shuffle,
    inverse_block_shuffle,
    partition_blocks,
    transform_dataset,
)

__version__ = "0.1.0"
