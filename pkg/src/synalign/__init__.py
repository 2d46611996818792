"""Semi-supervised segmentation with synthetic unlabeled images.

An EMA teacher pseudo-labels synthetic images, soft-mix blends them with
labeled real images under smoothed masks, and the student minimises soft
Dice + soft cross-entropy plus a nearest-neighbour alignment loss computed
in a frozen feature space.
"""

from .data_io import RunConfig, load_config, make_splits, read_embeddings, write_embeddings
from .errors import SynAlignError
from .losses import nn_min_distances, sa_loss, soft_cross_entropy, soft_dice_loss, soft_segmentation_loss
from .pseudo_label import EmaState, ema_update, generate_pseudo_labels, largest_component_filter
from .soft_mix import build_blend_mask, make_complementary_mixtures, sample_blend_region

__version__ = "0.1.0"
