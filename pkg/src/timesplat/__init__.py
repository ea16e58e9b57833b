"""timesplat: CPU training and rendering of time-variant 3D scenes using
anchor-based neural Gaussian splatting with learnable time embeddings."""

from .errors import (
    ConfigError,
    FormatError,
    NumericalError,
    ParseError,
    ShapeError,
    StateError,
    TimesplatError,
    UnsupportedError,
)
from .model import (
    AnchorSet,
    Camera,
    GaussianGrads,
    HeadSet,
    NeuralGaussianBatch,
    SceneModel,
    TimeEmbeddingTable,
    build_covariance,
    decode_neural_gaussians,
    decode_backward,
    decompose_color,
    default_heads,
    interpolate_embedding,
    positional_time_encoding,
)
from .loss_metrics import LossReport, LossWeights, l1_loss, psnr, ssim, total_loss, volume_regularizer
from .rasterizer import RenderOutput, composite_backward, composite_forward, project, project_backward, render
from .dataset import SceneManifest, image_read, image_write, load_colmap_text, load_manifest
from .optim import AdamState, TrainConfig, adam_step, adapt_anchors, train
from .scene_io import load_checkpoint, load_scene, save_checkpoint, save_scene

__version__ = "0.1.0"
