"""Regular-grid tiling for whole-volume inference and overlap-average stitching.

Training patches are category balanced, which needs labels; inference instead
tiles a regular grid: half-patch stride in plane, z stride 6 only when the
volume is deeper than one patch, and the last window per axis clamped flush to
the boundary so every voxel is covered.
"""

from __future__ import annotations

import torch

from ..models.bridge import PatchSpec


def _axis_origins(dim: int, size: int, stride: int) -> list[int]:
    if size > dim:
        raise ValueError(f"window {size} exceeds axis extent {dim}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    origins = list(range(0, dim - size + 1, stride))
    if origins[-1] != dim - size:
        origins.append(dim - size)
    return origins


def tile_volume(
    shape,
    patch_size,
    inplane_stride,
    z_stride: int,
    subject_id: str = "",
) -> list[PatchSpec]:
    """Ordered patch windows covering (Z, H, W); in-plane origins stay 4-aligned."""
    z_dim, h, w = shape
    pz, py, px = patch_size
    zs = [0] if z_dim == pz else _axis_origins(z_dim, pz, z_stride)
    ys = _axis_origins(h, py, inplane_stride[0])
    xs = _axis_origins(w, px, inplane_stride[1])
    for name, origins in (("y", ys), ("x", xs)):
        bad = [o for o in origins if o % 4]
        if bad:
            raise ValueError(
                f"{name} origins {bad} break 4-alignment; use multiple-of-4 "
                "strides on a standardized grid"
            )
    return [
        PatchSpec((z0, y0, x0), (pz, py, px), subject_id) for z0 in zs for y0 in ys for x0 in xs
    ]


def stitch(plan: list[PatchSpec], blocks: list[torch.Tensor], shape) -> torch.Tensor:
    """Uniform overlap averaging of per-patch class probabilities.

    Accumulation runs in ascending origin order regardless of how the plan is
    permuted, so the output is bitwise independent of patch ordering.
    """
    if len(plan) != len(blocks):
        raise ValueError(f"{len(plan)} patch specs but {len(blocks)} probability blocks")
    if not plan:
        raise ValueError("empty tile plan")
    channels = blocks[0].shape[0]
    # float64 accumulator: float32 sums of overlapping patches drift past the
    # stitching tolerance; cast back after the divide
    accum = torch.zeros((channels, *shape), dtype=torch.float64)
    coverage = torch.zeros(shape, dtype=torch.float64)
    order = sorted(range(len(plan)), key=lambda i: plan[i].origin)
    for i in order:
        spec, block = plan[i], blocks[i]
        if tuple(block.shape) != (channels, *spec.size):
            raise ValueError(
                f"block shape {tuple(block.shape)} does not match patch {spec.size}"
            )
        zs, ys, xs = spec.slices()
        accum[:, zs, ys, xs] += block
        coverage[zs, ys, xs] += 1.0
    if (coverage == 0).any():
        raise ValueError("tile plan leaves voxels uncovered")
    return (accum / coverage).to(torch.float32)
