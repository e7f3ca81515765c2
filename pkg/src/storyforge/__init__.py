"""storyforge: a desk-scale story-to-video pipeline skeleton.

The package covers the full pipeline on a toy diffusion transformer:
dual-level plan parsing and key-frame interpolation (:mod:`storyforge.plan`),
box rasterization onto the latent grid (:mod:`storyforge.regions`), the
region-routing attention mask (:mod:`storyforge.attention`), low-rank adapter
algebra and placement (:mod:`storyforge.lora`), the model itself
(:mod:`storyforge.dit`), motion/subject prior training
(:mod:`storyforge.training`), motion-clip retrieval
(:mod:`storyforge.retrieval`), and LLM plan generation
(:mod:`storyforge.planner`).
"""

from .plan import (
    BBox,
    FrameLevelPlan,
    HighLevelPlan,
    LatentPlan,
    RuleConfig,
    emit_frame_plan,
    emit_high_level_plan,
    interpolate_plan,
    parse_frame_plan,
    parse_high_level_plan,
    validate_frame_plan,
    validate_high_level_plan,
)
from .regions import LatentGrid, RegionMap, build_region_map, rasterize_bbox
from .attention import AttentionMask, SegmentLayout, build_attention_mask, mask_query
from .lora import (
    AdapterEntry,
    AdapterSet,
    LoraModule,
    init_lora,
    lora_apply,
    merge_lora,
    plan_lora_placement,
)
from .dit import ModelConfig, NoiseSchedule, ToyDiT, add_noise, dit_forward, sample
from .training import (
    DebiasConfig,
    TrainConfig,
    debias,
    loss_ad,
    loss_motion,
    loss_org,
    train_motion_prior,
    train_subject_prior,
)
from .retrieval import RetrievalConfig, retrieve_motion
from .planner import StoryRequest, generate_plan, plan_story

__version__ = "0.1.0"

__all__ = [
    "BBox", "FrameLevelPlan", "HighLevelPlan", "LatentPlan", "RuleConfig",
    "parse_high_level_plan", "parse_frame_plan", "emit_high_level_plan",
    "emit_frame_plan", "validate_frame_plan", "validate_high_level_plan",
    "interpolate_plan",
    "LatentGrid", "RegionMap", "rasterize_bbox", "build_region_map",
    "SegmentLayout", "AttentionMask", "build_attention_mask", "mask_query",
    "LoraModule", "AdapterEntry", "AdapterSet", "init_lora", "lora_apply",
    "merge_lora", "plan_lora_placement",
    "ModelConfig", "NoiseSchedule", "ToyDiT", "add_noise", "dit_forward",
    "sample",
    "DebiasConfig", "TrainConfig", "loss_org", "debias", "loss_ad",
    "loss_motion", "train_motion_prior", "train_subject_prior",
    "RetrievalConfig", "retrieve_motion",
    "StoryRequest", "generate_plan", "plan_story",
]
