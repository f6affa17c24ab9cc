"""Agent-supervised robot skill lifecycle at desk scale.

Subsystems: structured memory (`memory`), the decision core (`agent`),
the wire-level tool bus (`toolbus`), a symbolic scene simulator
(`simenv`), the skill pool with learning curves (`policypool`),
self-resetting data collection (`collector`), deployment supervision
(`orchestrator`), the experiment harness with its exact success oracle
(`harness`), and a toy flow-matching action policy (`flowpolicy`).
"""

from .errors import SkillcycleError

__version__ = "0.1.0"

__all__ = ["SkillcycleError", "__version__"]
