"""Cross-layer information divergence and divergence-guided meta reweighting.

The package trains classifiers on noisily labeled data by coupling them
with a small weighting network whose updates are driven by a label-free
divergence between the similarity structure of the embedding space and
of the prediction space. Retained low-divergence snapshots are averaged
at inference time.
"""

from .clid import (ClidScore, SimilarityGraphs, build_similarity_graphs, class_prob_graph,
                   clid_from_batch, clid_grad, clid_loss, embedding_graph)
from .data import (LabeledDataset, MetaSet, NoiseSpec, apply_noise, generate_blobs,
                   inject_asymmetric, inject_instance_dependent, inject_symmetric,
                   read_csv, select_meta_set, write_csv)
from .ensemble import (BoundCheck, Snapshot, SnapshotStore, bound_check,
                       bound_check_scores, ensemble_predict, exponential_loss,
                       load_snapshot_dir, per_snapshot_risk, read_snapshot,
                       write_snapshot)
from .estimator import ClidMuClassifier
from .evaluation import (CorrelationReport, CorrelationStudyConfig, MetricsRow, accuracy,
                         clid_on_set, correlation_study, pearson, rpr, train_plain_ce,
                         write_metrics_csv)
from .metaloop import (NonfiniteError, TrainConfig, TrainerState, VirtualStep,
                       actual_train_step, meta_train_step, run_training,
                       select_pseudo_clean_gmm, virtual_train_step)
from .networks import (ForwardTrace, MetaNet, MlpClassifier, ParamLayout, ParamVector,
                       backward_weighted_ce, backward_weighted_mae, classifier_forward,
                       layer_grad_norms, metanet_forward, metanet_grad,
                       metanet_grad_matrix, model_from_text, model_to_text,
                       per_sample_ce, per_sample_grad_matrix, per_sample_grads,
                       per_sample_mae)
from .numerics import cosine_similarity, make_rng, pairwise_cosine, row_normalize, softmax

__version__ = "0.1.0"
