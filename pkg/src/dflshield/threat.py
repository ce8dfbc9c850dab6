"""Static threat-model tables used by the report generator.

Enumerates what a malicious observer can learn from federation traffic,
which attack goes after which information, and which security component
mitigates which attack. The comparison report joins these tables with the
measured results so every run states what its setting actually protected.
"""

from __future__ import annotations

import enum


class InformationKind(str, enum.Enum):
    MODEL_PARAMETERS = "model_parameters"
    TOPOLOGY = "topology"
    ROLES = "roles"
    METRICS = "metrics"
    ACTIVITY_PERIODS = "activity_periods"
    MODEL_ARCHITECTURE = "model_architecture"
    COMMUNICATION_PATTERNS = "communication_patterns"


class AttackKind(str, enum.Enum):
    EAVESDROP = "eavesdrop"
    MITM = "mitm"
    NETWORK_MAP = "network_map"
    ECLIPSE = "eclipse"


class Importance(str, enum.Enum):
    LOW = "low"
    HIGH = "high"
    CRITICAL = "critical"


ATTACK_GOALS: dict[AttackKind, tuple[str, Importance]] = {
    AttackKind.EAVESDROP: ("extract sensitive information from participant traffic", Importance.HIGH),
    AttackKind.MITM: ("manipulate or inject data to disrupt federation operations", Importance.CRITICAL),
    AttackKind.NETWORK_MAP: ("learn the network structure to stage targeted attacks", Importance.LOW),
    AttackKind.ECLIPSE: ("isolate nodes to extract information or disrupt communications", Importance.CRITICAL),
}

INFORMATION_AT_RISK: dict[AttackKind, tuple[InformationKind, ...]] = {
    AttackKind.EAVESDROP: (
        InformationKind.MODEL_PARAMETERS,
        InformationKind.TOPOLOGY,
        InformationKind.ROLES,
    ),
    AttackKind.MITM: (
        InformationKind.COMMUNICATION_PATTERNS,
        InformationKind.ROLES,
    ),
    AttackKind.NETWORK_MAP: (
        InformationKind.TOPOLOGY,
        InformationKind.MODEL_ARCHITECTURE,
    ),
    AttackKind.ECLIPSE: (
        InformationKind.ACTIVITY_PERIODS,
        InformationKind.TOPOLOGY,
        InformationKind.ROLES,
        InformationKind.COMMUNICATION_PATTERNS,
    ),
}

# component -> attack -> mitigated?
MITIGATIONS: dict[str, dict[AttackKind, bool]] = {
    "encryption": {
        AttackKind.EAVESDROP: True,
        AttackKind.MITM: True,
        AttackKind.NETWORK_MAP: False,
        AttackKind.ECLIPSE: True,
    },
    "mtd": {
        AttackKind.EAVESDROP: False,
        AttackKind.MITM: True,
        AttackKind.NETWORK_MAP: True,
        AttackKind.ECLIPSE: True,
    },
}

PROTECTED_BY_SETTING: dict[str, tuple[InformationKind, ...]] = {
    "baseline": (),
    "encryption": (
        InformationKind.MODEL_PARAMETERS,
        InformationKind.ROLES,
        InformationKind.COMMUNICATION_PATTERNS,
    ),
    "encryption_mtd": (
        InformationKind.MODEL_PARAMETERS,
        InformationKind.ROLES,
        InformationKind.COMMUNICATION_PATTERNS,
        InformationKind.TOPOLOGY,
        InformationKind.ACTIVITY_PERIODS,
    ),
}


def components_of(setting: str) -> tuple[str, ...]:
    return {
        "baseline": (),
        "encryption": ("encryption",),
        "encryption_mtd": ("encryption", "mtd"),
    }[setting]


def mitigated_attacks(setting: str) -> tuple[AttackKind, ...]:
    """Attacks covered by at least one active component of the setting."""
    active = components_of(setting)
    return tuple(a for a in AttackKind if any(MITIGATIONS[c][a] for c in active))


def threat_matrix() -> list[dict]:
    """One row per attack: goal, importance, information at risk, mitigations."""
    rows = []
    for attack in AttackKind:
        goal, importance = ATTACK_GOALS[attack]
        rows.append(
            {
                "attack": attack.value,
                "goal": goal,
                "importance": importance.value,
                "information_at_risk": [i.value for i in INFORMATION_AT_RISK[attack]],
                "mitigated_by": [c for c in MITIGATIONS if MITIGATIONS[c][attack]],
            }
        )
    return rows
