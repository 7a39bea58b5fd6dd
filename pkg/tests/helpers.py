from dclr.config import Config, apply_overrides
from dclr.synthvideo import build_dataset

TINY = {
    "data.num_videos": 8, "data.frames_per_video": 12, "data.spatial_size": 32, "data.sprite_size": 6,
    "augment.crop_size": 16,
    "encoder.channel_widths": [4, 8], "encoder.spatial_strides": [2, 2], "encoder.temporal_strides": [1, 2],
    "encoder.embed_dim": 8, "encoder.projection_hidden": 8,
    "train.batch_size": 4, "train.clip_len": 4, "train.epochs": 2, "train.queue_size": 16, "train.topk": 2,
    "train.extractor_update_interval": 1, "eval.num_eval_clips": 2,
}


def tiny_config(**overrides) -> Config:
    cfg = apply_overrides(Config(), TINY)
    apply_overrides(cfg, {k.replace("__", "."): v for k, v in overrides.items()})
    return cfg.validate()


def tiny_dataset(cfg=None):
    return build_dataset((cfg or tiny_config()).data)
