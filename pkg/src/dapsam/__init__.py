"""Domain-adaptive prompting for a frozen ViT segmenter, at desk scale."""
from .adapter import AdapterParams, adapter_forward, channel_filter, fuse_low_level
from .config import DataConfig, DomainSpec, EncoderConfig, LossConfig, RunConfig, Toggles, TrainConfig, load_config
from .decoder import decode, predict_mask, upsample_logits
from .encoder import encoder_forward, low_level_project, patch_embed
from .losses import combined_loss, cross_entropy, dice_loss
from .metrics import asd, dsc
from .params import ParameterStore, partition_parameters
from .prompt import (
    PromptParams,
    activation_map,
    adapt_prototype,
    export_prototypes,
    extract_prototype,
    generate_prompt,
    memory_weights,
)

__version__ = "0.1.0"
