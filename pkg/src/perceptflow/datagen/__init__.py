from .scene import (ArticulatedFigure, Background, CameraModel, ConfigError, GenConfig,
                    JOINT_NAMES, Motion, PALETTE, PART_NAMES, SceneSpec, canonical_figure,
                    look_at, pose_figure, sample_scene, scenes_equal)
from .render import GroundTruthBundle, cast, pixel_rays, project, render_clip
