"""Image-to-feature front end: pretrained CNN patch features as SPF1 files."""

from .augment import augment_arrays, augment_for_overlap, sample_params
from .backbone import FeatureEmbedder, downsample_mask
from .config import BTAD_CONFIG, ExtractorConfig
from .dataset import walk_class_dir
from .extract import extract
from .spf import write_manifest, write_spf1

__version__ = "0.1.0"
