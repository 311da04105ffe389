"""Weakly supervised segmentation from image-level labels.

An attention-gated embedding is trained with a margin loss (optionally
divide-and-conquer over embedding slices); its attention maps, thresholded,
become proxy masks for a U-Net. GradCAM on a plain classifier is the
baseline saliency.
"""

from .dataio import (BalancedBatchSampler, BalancedBatchSpec, DataError, DatasetManifest,
                     GroundTruthStore, SyntheticConfig, generate_synthetic, load_manifest)
from .manifold import (ManifoldTrainConfig, MarginConfig, batch_margin_loss, build_pairs,
                       cluster_embeddings, margin_loss, split_dims, train_dcml, train_ml)
from .metrics import DiceReport, compare_table, dice, evaluate
from .nets import (AttentionModule, Backbone, BackboneConfig, Classifier, ManifoldNet, UNet,
                   UNetConfig, attentive_embed)
from .saliency import ExtractConfig, extract_attention, gradcam, gradcam_map, threshold_map
from .segtrain import SegTrainConfig, pixel_ce_loss, train_unet

__version__ = "0.1.0"
