"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class JointPromptError(Exception):
    """Base class for all errors raised by jointprompt."""


class ConfigError(JointPromptError):
    """Invalid configuration detected before any backend call."""


# -- topology -------------------------------------------------------------


class TopologyError(ConfigError):
    pass


class CycleDetected(TopologyError):
    def __init__(self, edge: tuple[str, str], cycle: list[str]):
        self.edge = edge
        self.cycle = cycle
        super().__init__(
            f"cycle detected through edge {edge[0]} -> {edge[1]} "
            f"(cycle: {' -> '.join(cycle)})"
        )


class UnknownAgentInEdge(TopologyError):
    pass


class UnknownAgent(TopologyError):
    pass


class DuplicateAgent(TopologyError):
    pass


class InvalidEdge(TopologyError):
    """Self-loop or duplicated edge."""


class NoOutputAgent(TopologyError):
    pass


class OutputAgentHasSuccessors(TopologyError):
    pass


class UnreachableOutput(TopologyError):
    pass


class InvalidPromptConfig(ConfigError):
    pass


# -- gateway --------------------------------------------------------------


class GatewayError(JointPromptError):
    """Backend failure. ``agent_id``/``query_id`` are filled in by callers."""

    agent_id: str | None = None
    query_id: str | None = None

    def annotate(self, agent_id: str | None = None, query_id: str | None = None):
        if agent_id is not None and self.agent_id is None:
            self.agent_id = agent_id
        if query_id is not None and self.query_id is None:
            self.query_id = query_id
        return self

    def __str__(self) -> str:
        base = super().__str__()
        where = []
        if self.agent_id is not None:
            where.append(f"agent={self.agent_id}")
        if self.query_id is not None:
            where.append(f"query={self.query_id}")
        return f"{base} [{', '.join(where)}]" if where else base


class TransportError(GatewayError):
    pass


class ProtocolError(GatewayError):
    pass


class AuthMissing(GatewayError):
    pass


class InvalidRequest(JointPromptError):
    pass


# -- runtime --------------------------------------------------------------


class TemplateRenderError(JointPromptError):
    pass


class InvalidSample(JointPromptError):
    pass


class MissingPredecessorOutput(JointPromptError):
    pass


class StaleBaseTrace(JointPromptError):
    pass


# -- reward / proposer ----------------------------------------------------


class EmptyBatch(JointPromptError):
    pass


class JudgeUnparseable(JointPromptError):
    pass


class EmptyPool(JointPromptError):
    pass


class TooFewTraces(JointPromptError):
    pass


class MissingPromptTag(JointPromptError):
    pass


class EmptyPrompt(JointPromptError):
    pass


class AllProposalsInvalid(JointPromptError):
    pass


# -- search / harness -----------------------------------------------------


class EmptyBeam(JointPromptError):
    pass


class SchemaVersionMismatch(JointPromptError):
    pass


class CorruptCheckpoint(JointPromptError):
    pass


class MissingLabels(JointPromptError):
    pass


class NoRecords(JointPromptError):
    pass
