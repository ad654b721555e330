from .distort import TABLE_ROWS, DistortionError, DistortionKind, DistortionSpec, distort, distort_pair
from .harness import DistortionResult, MetricsReport, OracleModel, evaluate, score_images, write_mask_png
from .jpeg import jpeg_roundtrip
from .metrics import f1_at, f1_curve, f1_optimal, pixel_auc
