"""wearseg: U-Net experimentation toolkit for tool-wear segmentation.

Submodules: corpus (images, masks, synthetic data), tiling (tiles and
overlap-tile stitching), augment (three-level augmentation), unet (model),
losses (CE / focal CE / soft-IoU), metrics (evaluation), training (protocol,
cross validation, experiment grid), reporting (tables and figures), cli.
"""

from .corpus import (AnnotatedImage, CorpusSplit, collapse_to_binary,
                     generate_synthetic_corpus, load_annotated_image,
                     load_corpus, split_corpus, synthetic_image, write_corpus)
from .tiling import (Tile, TileGeometry, cut_tiles, filter_wear_tiles,
                     horizontal_segments, load_tiles, save_tiles,
                     stitch_predict, vertical_center_crop)
from .augment import (AugmentationSpec, build_training_set, gaussian_blur,
                      geometry_for_level, photometric, precrop_geometric,
                      sample_spec)
from .unet import (ModelConfig, WearUNet, activate, build_unet,
                   load_checkpoint, make_predictor, predict_classes,
                   predict_probs, save_checkpoint)
from .losses import (LossSpec, cross_entropy, focal_cross_entropy,
                     iou_loss_binary, iou_loss_multiclass, make_loss)
from .metrics import (ConfusionCounts, MetricReport, confusion,
                      evaluate_testset, fnbgr, scores, summarize_folds)
from .training import (ExperimentConfig, TrainerSettings, TrainState,
                       cross_validate, early_stop_check, grid_configs,
                       lr_schedule_step, run_grid, train_final, train_fold)

__version__ = "0.1.0"
