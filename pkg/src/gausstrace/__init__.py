"""gausstrace: CPU ray tracing of deformable 3D Gaussian scenes.

The library renders dynamic scenes represented as 3D Gaussians through
physically-based camera models (pinhole, polynomial fisheye, thin-lens
depth of field, rolling shutter with chunked sensing times) and fits
Gaussian parameters to reference images with analytic gradients.
"""

from .cameras import (CameraPose, CameraRig, DofParams, FisheyeParams,
                      RollingShutterParams, RowChunk, SensorSpec,
                      aperture_samples, camera_from_json, camera_to_json,
                      chunk_schedule, dof_sample_ray, fisheye_ray, load_camera,
                      pinhole_ray, row_sensing_time)
from .deformation import (HexPlaneField, KeyframeTrack, Mlp, decode_residuals,
                          deform_snapshot, encode_spacetime, interp_plane)
from .errors import (GaussTraceError, InvalidLensError, InvalidParameterError,
                     NumericalAbortError, SceneValidationError)
from .fitter import (FitConfig, FitReference, ParamGradients, backprop_ray,
                     densify_and_prune, fit, l1_loss)
from .images import ImageBuffer, load_image, save_image
from .metrics import circular_mask, masked_metric, psnr, ssim
from .render import (RenderJob, frame_times, render_frame, render_frame_loaded,
                     render_rolling_frame, render_sequence)
from .scene import (Gaussian, SceneSnapshot, covariance_from_params,
                    rotation_matrices, sh_basis, sh_eval_color)
from .sceneio import load_scene, save_scene
from .tracer import (ALPHA_MAX, DEFAULT_K, EPS_RESPONSE, T_MIN, Bvh, GaussianHit,
                     Ray, build_bvh, collect_hits, gaussian_peak_response,
                     prepare_scene, trace_ray, trace_rays)

__version__ = "0.1.0"
