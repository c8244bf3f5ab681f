from .crack import (
    CrackSample,
    SimulatorConfig,
    assemble_tiles,
    measured_thickness,
    simulate_crack,
    simulate_many,
    tile_crops,
)
from .imageio import read_image, read_mask, write_image, write_mask, write_overlay
from .mnist import MnistScaleConfig, build_mnist_scale, read_idx, write_idx

__all__ = [
    "CrackSample",
    "MnistScaleConfig",
    "SimulatorConfig",
    "assemble_tiles",
    "build_mnist_scale",
    "measured_thickness",
    "read_idx",
    "read_image",
    "read_mask",
    "simulate_crack",
    "simulate_many",
    "tile_crops",
    "write_idx",
    "write_image",
    "write_mask",
    "write_overlay",
]
