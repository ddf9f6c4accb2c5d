"""Non-myopic sequential decoding via foresight resampling, with baselines,
diagnostics, simulated environments, and an experiment harness."""

__version__ = "0.1.0"

from .core import (
    Action,
    ConfigError,
    DecodeError,
    EnergyScore,
    Rollout,
    RunConfig,
    StateObs,
    Step,
    Trajectory,
    decode_trajectory,
    encode_trajectory,
    rng_stream,
    validate_config,
)
from .energy import EnergySpec, expected_future_return, score_rollout
from .engine import (
    CandidateSet,
    EpisodeAccounting,
    TrajectoryPool,
    enumerative_mpc_decode,
    enumerative_mpc_step,
    predictive_decode,
    resample,
)
from .envs import (
    BlocksState,
    BlocksWorldEnv,
    EnvInstance,
    Environment,
    EnvError,
    ListSumEnv,
    ListSumSpec,
    SequenceEnv,
    load_suite,
    make_blocks_env,
    make_env,
    save_suite,
)
from .policy import (
    Policy,
    PolicyContext,
    PolicyError,
    ScoringUnavailable,
    SoftmaxValuePolicy,
    SoftmaxValueSpec,
    SupportUnavailable,
    TabularPolicy,
    TabularPolicySpec,
    UniformValidPolicy,
    env_world,
)

__all__ = [name for name in dir() if not name.startswith("_")]
