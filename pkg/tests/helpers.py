"""Small shared fixtures for fast training-level tests."""
from functools import lru_cache

from anchorpose.config import TrainConfig
from anchorpose.data_synth import SyntheticHandConfig, generate_dataset, stack_records

TINY = TrainConfig(image_size=32, d_model=16, ffn_dim=32, heads=2, points=2, enc_layers=1,
                   dec_layers=1, gn_groups=4, backbone_widths=(4, 8, 16, 16, 16),
                   batch_size=8, epochs=1, learning_rate=1e-3)


@lru_cache(maxsize=None)
def tiny_data(count: int, seed: int):
    return stack_records(generate_dataset(SyntheticHandConfig(image_size=32), count, seed=seed))
