"""Whole-slide image segmentation and analysis engine.

Pipeline stages: pyramid IO -> tissue masking -> patch grids -> pluggable
patch scorers -> overlap-stitched probability maps -> uncertainty maps ->
region features -> metastasis typing / pN-staging / tumour burden -> metrics.
An HTTP service and a CLI bind the stages together.
"""

from .pyramid import (LevelInfo, RegionRequest, SlidePyramid, build_pyramid,
                      list_slides, open_pyramid, write_pyramid)
from .preproc import (MorphKernel, TissueMask, median_blur, morphology,
                      otsu_threshold, replace_black, rgb_to_hsv, tissue_mask)
from .sampler import (AugmentSpec, LabelledCoord, SampleGrid, augment,
                      build_grid, invert_geometric, label_patch, perturb,
                      sample_training_set, stratified_folds)
from .scorer import (BlobbyScorer, ConstantScorer, EnsembleHandle,
                     OracleScorer, PatchBatch, ProbPatchBatch, ScorerError,
                     build_scorer, open_external)
from .inference import (InferenceConfig, ProbabilityMap, merge_partials,
                        run_segmentation, threshold_map)
from .uncertainty import (UncertaintyMap, aleatoric_map, combined_map,
                          epistemic_map)
from .analysis import (BurdenResult, Region, RegionFeatureVector,
                       connected_components, convex_hull_mask,
                       extract_features, region_props, tumor_burden,
                       whole_tumor_approx)
from .staging import (Dataset, Forest, PNStage, SlideLabel, classify_rule,
                      ensemble_classify, pn_stage, rf_predict, rf_train,
                      smote, smote_tomek, tomek_remove)
from .metrics import (Detection, FrocCurve, LossWeights, cross_entropy,
                      detections_from_map, dice, dice_loss, froc, hybrid_loss,
                      jaccard, kappa_quadratic)

__version__ = "0.1.0"
