from .tiling import stitch, tile_volume
from .pipeline import ensemble_average, infer_preprocessed, run_two_stage

__all__ = ["stitch", "tile_volume", "ensemble_average", "infer_preprocessed", "run_two_stage"]
