"""Display photometric stereo: synthetic capture, normal reconstruction and pattern learning."""

__version__ = "0.1.0"

from .errors import (BehindCameraError, ConvergenceError, DegenerateEntryError, InvalidArgumentError,
                     UndefinedMeanError)
from .learning import (FAMILIES, AdamState, OptimizerSchedule, PatternParams, TrainingEntry, TrainingSet,
                       adam_step, forward, gradient, init_patterns, learn, lr_at, smooth_patterns,
                       value_and_grad)
from .lens import (CameraModel, DistortionCoefficients, default_camera, distort, invert_distortion,
                   load_camera, project, save_camera, undistort_image)
from .pipeline import (ReconstructionSettings, SensorSettings, bundled_scenes, bundled_training_set,
                       reconstruct, render_bundle)
from .scene import (AlbedoMap, BasisStack, DisplayGeometry, NormalMap, PatternSet, SceneMesh,
                    default_display, generate_scene, make_display_geometry, render_basis)
from .sensor import (ExposureStack, NoiseModel, RadianceImage, WeightFunction, gaussian_filter, merge_hdr,
                     simulate_ldr)
from .stereo import (CaptureSet, LightField, angular_error, estimate_albedo, light_directions, relight,
                     solve_normals)
from .tensorfile import read_tensor, write_tensor
