"""MiSuRe saliency for image segmentation.

Explains one predicted class of a segmentation model in two stages: grow a
sufficient region by dilating the prediction until the masked image
reproduces it, then optimize a sparse, smooth mask inside that region.
Includes RISE, occlusion and Seg-Grad-CAM baselines, the Triangle synthetic
dataset, a small reference model and a reliability classifier.
"""

from .adapters import (
    FunctionAdapter,
    SegmentationAdapter,
    SerializedAdapter,
    SpuriousPatchAdapter,
    finite_difference_vjp,
    get_adapter,
    register_adapter,
    registered_adapters,
)
from .baselines import (
    generate_rise_masks,
    grad_cam_map,
    minmax_normalize,
    occlusion_saliency,
    rise_from_masks,
    rise_saliency,
    seg_grad_cam,
    threshold_saliency,
)
from .config import MisureConfig, RiseConfig, SgcConfig, fingerprint
from .estimators import (
    Explanation,
    MisureExplainer,
    OcclusionExplainer,
    RiseExplainer,
    SegGradCamExplainer,
)
from .exceptions import *  # noqa: F401,F403
from .masks import (
    DISK3,
    MetricReport,
    StructuringElement,
    apply_mask,
    binarize_prediction,
    dice_explained,
    dice_hard,
    dice_soft,
    dilate,
    insertion_curve,
    perturbation_ratio,
    resize_mask,
    resize_mask_adjoint,
)
from .minimal import MsrResult, find_msr, objective, objective_gradient
from .reliability import ReliabilityClassifier, ReliabilityFeatures, extract_features, roc_auc
from .sufficient import SrResult, find_sr, init_mask
from .toy_model import (
    TinyUNet,
    ToyModelSpec,
    TorchAdapter,
    load_model,
    load_toy_adapter,
    save_model,
    toy_adapter,
    train_toy_model,
)
from .triangle import (
    DatasetSplit,
    TriangleSample,
    generate_triangle,
    generate_triangle_tiny,
    load_dataset,
    save_dataset,
)

__version__ = "0.1.0"
