"""Variant assembly, priors, matching and the training objective."""
from .loss import hard_negative_mask, multibox_loss
from .matching import MatchResult, match_and_encode
from .model import VARIANTS, DetectorModel, VariantSpec, build_variant
from .priors import SSD300_LAYOUT, LevelLayout, PriorBoxSet, generate_priors
