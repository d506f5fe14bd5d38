"""Joint prompt optimization for multi-agent LLM systems on a fixed DAG."""

from .errors import JointPromptError
from .gateway import BackendProfile, ChatRequest, Gateway, Message
from .reward import MisalignmentBuffer, RewardWeights, SampleIndicators, score_candidate
from .runtime import ExecutionTrace, QuerySample, execute_counterfactual, execute_full
from .search import Hyperparams, Optimizer, OptimizerRunState
from .topology import AgentSpec, CommGraph, PromptConfig

__version__ = "0.1.0"

__all__ = [
    "AgentSpec",
    "BackendProfile",
    "ChatRequest",
    "CommGraph",
    "ExecutionTrace",
    "Gateway",
    "Hyperparams",
    "JointPromptError",
    "Message",
    "MisalignmentBuffer",
    "Optimizer",
    "OptimizerRunState",
    "PromptConfig",
    "QuerySample",
    "RewardWeights",
    "SampleIndicators",
    "execute_counterfactual",
    "execute_full",
    "score_candidate",
]
