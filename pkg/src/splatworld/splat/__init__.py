from .model import (
    SH_C0,
    Gaussian2D,
    GaussianSet,
    dedup_background,
    filter_radius_outliers,
    init_from_rgbd,
    radius_outlier_mask,
    rgb_to_sh0,
    sh0_to_rgb,
    world_splats,
)
from .raster import (
    Buffers,
    RenderOptions,
    SplatGrads,
    assemble,
    backward,
    box_downsample,
    project_splats,
    rasterize,
    render_buffers,
    render_downsampled,
    resized_intrinsics,
)
