"""Nearest-prototype 3D structure guidance for facial aesthetics enhancement."""

from .errors import (
    BadMagicError,
    DimensionError,
    EmptyRenderError,
    NNSGError,
    ParseError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
    ZeroNormError,
)
from .guidance import (
    GuidanceBundle,
    GuidanceConfig,
    GuidanceExtractor,
    canny,
    combine_guidance,
    depth_map,
    extract_guidance,
)
from .metrics import MetricReport, SSIMConfig, id_similarity, psnr, ssim
from .morphable import (
    FusionWeights,
    Mesh,
    MorphableBasis,
    ParamVector,
    fuse_identity,
    load_basis,
    load_params,
    pose_to_transform,
    reconstruct_shape,
    reconstruct_texture,
    save_basis,
    save_params,
    synthetic_basis,
)
from .protodb import (
    AttributeTable,
    NearestPrototypeSearch,
    PrototypeDatabase,
    PrototypeRecord,
    build_database,
    cosine_similarity,
    filter_prototypes,
    load_database,
    nearest,
    parse_attribute_table,
    save_database,
)
from .renderer import (
    Camera,
    RenderedFace,
    compute_normals,
    project_vertices,
    rasterize,
    shade_sh,
    silhouette_mask,
)

__version__ = "0.1.0"
