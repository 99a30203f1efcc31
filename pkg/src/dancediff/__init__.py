"""Music- and style-conditioned dance generation with a transformer diffusion model."""
from .conditioning import AudioCondition, StylePrompt, encode_style, make_audio
from .control import EditTask, SpatialTemporalMask, build_mask, edit, generate_long
from .datagen import ClipRecord, synth_clip, synth_corpus
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, preset, save_checkpoint
from .diffusion import NoiseSchedule, Trainer, TrainingConfig, guided_sample, make_schedule
from .metrics import evaluate
from .skeleton import MotionSequence, Skeleton, desk_skeleton, forward_kinematics

__version__ = "0.1.0"
