"""Viewpoint-guided spherical maps for semantic keypoint correspondence.

The package learns a per-pixel mapping from precomputed dense image
features onto the unit sphere, regularized by weak viewpoint supervision
and simple geometric priors, and matches keypoints across object instances
by blending feature similarity with sphere similarity. Evaluation covers
the standard PCK accuracy and a ranking metric (KAP) that also penalizes
confident matches onto symmetric counterparts.
"""

from .autodiff import Tensor, finite_diff_grad, grad
from .dataio import (DenseFeatureMap, ImageRecord, generate_world,
                     load_dataset, read_feature_map, render_view,
                     write_dataset, write_feature_map)
from .evaluate import MatcherSpec, evaluate_dataset
from .geometry import (cosine_distance, image_determinant, mean_direction,
                       sphere_determinant, tangent_project, viewpoint_vector)
from .losses import (LossWeights, Triplet, orientation_loss,
                     reconstruction_loss, relative_distance_loss,
                     sample_triplets, total_loss, viewpoint_loss)
from .matcher import (SimilarityVolume, match_combined, match_sphere_only,
                      similarity_volume)
from .metrics import (KapSample, KeypointCandidate, MetricReport,
                      average_precision, average_precision_bruteforce, kap,
                      mirror_confusion_stats, pck)
from .models import (ModelConfig, PrototypeParams, SphereMapperParams,
                     init_params, load_checkpoint, prototype_query,
                     save_checkpoint, sphere_mapper_forward)
from .optim import AdamState, adam_step, clip_global_norm
from .trainer import FitResult, TrainConfig, fit, load_train_config

__version__ = "0.1.0"
