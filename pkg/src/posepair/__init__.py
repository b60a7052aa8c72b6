"""Paired robot/human pose generation with a learned body-pose prior and
two-stage supervised motion retargeting."""

__version__ = "0.1.0"

from .body import ReferenceBody, generate_corpus, human_fk, load_body  # noqa: E402
from .evaluation import EvalReport, evaluate, run_ablation  # noqa: E402
from .kinematics import KinematicChain, RobotProfile, forward_kinematics, load_profile, load_urdf, parse_urdf  # noqa: E402
from .metrics import joint_error, link_error  # noqa: E402
from .pairing import PairedDataset, ScaleTheta, filter_extreme, generate_pairs, sample_training_batch, search_theta  # noqa: E402
from .prior import IKConfig, PosePrior, ik_solve  # noqa: E402
from .retarget import OneStageRetargeter, TrainConfig, TwoStageRetargeter  # noqa: E402

__all__ = [
    "EvalReport",
    "IKConfig",
    "KinematicChain",
    "OneStageRetargeter",
    "PairedDataset",
    "PosePrior",
    "ReferenceBody",
    "RobotProfile",
    "ScaleTheta",
    "TrainConfig",
    "TwoStageRetargeter",
    "evaluate",
    "filter_extreme",
    "forward_kinematics",
    "generate_corpus",
    "generate_pairs",
    "human_fk",
    "ik_solve",
    "joint_error",
    "link_error",
    "load_body",
    "load_profile",
    "load_urdf",
    "parse_urdf",
    "run_ablation",
    "sample_training_batch",
    "search_theta",
]
