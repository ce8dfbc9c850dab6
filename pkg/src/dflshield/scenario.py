"""Declarative run descriptions and their TOML form.

A scenario file has four sections: [scenario] (federation shape, security
setting, round budget, MTD knobs), [fabric] (backend and channel model),
[train] (dataset and SGD hyperparameters), and an optional [attack].
Parsing is strict: unknown keys and out-of-range values fail validation
with a field-path diagnostic, and ``to_toml``/``parse`` round-trip to an
equal config.
"""

from __future__ import annotations

import enum
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fabric import FabricConfig
from .model import ACTIVATIONS, TrainConfig


class ConfigError(Exception):
    """Invalid scenario: ``field`` names the offending key path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"[{field_path}] {message}")
        self.field_path = field_path


class SecuritySetting(str, enum.Enum):
    BASELINE = "baseline"
    ENCRYPTION = "encryption"
    ENCRYPTION_MTD = "encryption_mtd"


class Role(str, enum.Enum):
    IDLE = "idle"
    TRAINER = "trainer"
    AGGREGATOR = "aggregator"
    PROXY = "proxy"


SETTING_ORDER = (SecuritySetting.BASELINE, SecuritySetting.ENCRYPTION, SecuritySetting.ENCRYPTION_MTD)


@dataclass(frozen=True)
class TrainSpec:
    """Dataset choice plus the local-SGD hyperparameters."""

    dataset: str = "blobs"  # "blobs" | "digits" | a CSV path
    samples: int = 1600
    classes: int = 4
    features: int = 2
    spread: float = 0.9
    hidden: tuple[int, ...] = (16,)
    activation: str = "relu"
    learning_rate: float = 0.05
    l2_lambda: float = 1e-4
    local_epochs: int = 3
    split_ratio: float = 0.8

    def train_config(self, rounds: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            l2_lambda=self.l2_lambda,
            local_epochs=self.local_epochs,
            rounds=rounds,
        )


@dataclass(frozen=True)
class AttackSpec:
    kind: str  # "eclipse" | "eavesdrop" | "network_map"
    attackers: int = 1
    target: int = 0
    start_round: int = 0
    end_round: int = -1  # -1 means "until the last round"

    def window(self, rounds: int) -> tuple[int, int]:
        end = rounds if self.end_round < 0 else min(self.end_round, rounds)
        return self.start_round, end


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int = 7
    nodes: int = 8
    topology: str = "random"  # "random" | "ring" | "full"
    topology_p: float = 0.5
    security: SecuritySetting = SecuritySetting.BASELINE
    rounds: int = 20
    receive_timeout_ms: float = 0.0  # 0 -> 5 x latency x fan-out
    key_renewal_interval: int = 1
    token_ttl_rounds: float = 10.0
    mtd_sample_size: int = 0  # 0 -> half the neighbors, rounded up
    mtd_rotation_interval: int = 1
    mtd_ports_per_node: int = 16
    pubkey_renewal_interval: int = 0  # 0 -> off
    roles: tuple[tuple[int, Role], ...] = ()
    output_dir: str = "runs"
    fabric: FabricConfig = field(default_factory=FabricConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    attack: AttackSpec | None = None

    def role_of(self, node_id: int) -> Role:
        for nid, role in self.roles:
            if nid == node_id:
                return role
        return Role.TRAINER

    def with_security(self, setting: SecuritySetting) -> "ScenarioConfig":
        return replace(self, security=setting, name=f"{self.name}")

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("scenario.name", "must be non-empty")
        if self.nodes < 2:
            raise ConfigError("scenario.nodes", f"need at least 2 nodes, got {self.nodes}")
        if self.topology not in ("random", "ring", "full"):
            raise ConfigError("scenario.topology", f"unknown generator {self.topology!r}")
        if not 0.0 < self.topology_p <= 1.0:
            raise ConfigError("scenario.topology_p", "must lie in (0, 1]")
        if self.rounds < 1:
            raise ConfigError("scenario.rounds", "must be >= 1")
        if self.receive_timeout_ms < 0:
            raise ConfigError("scenario.receive_timeout_ms", "must be >= 0")
        if self.key_renewal_interval < 1:
            raise ConfigError("scenario.key_renewal_interval", "must be >= 1")
        if self.token_ttl_rounds <= 0:
            raise ConfigError("scenario.token_ttl_rounds", "must be > 0")
        if self.mtd_sample_size < 0:
            raise ConfigError("scenario.mtd_sample_size", "must be >= 0 (0 = auto)")
        if self.mtd_rotation_interval < 1:
            raise ConfigError("scenario.mtd_rotation_interval", "must be >= 1")
        if self.mtd_ports_per_node < 2:
            raise ConfigError("scenario.mtd_ports_per_node", "need at least 2 ports to rotate")
        if self.pubkey_renewal_interval < 0:
            raise ConfigError("scenario.pubkey_renewal_interval", "must be >= 0 (0 = off)")
        for nid, _ in self.roles:
            if not 0 <= nid < self.nodes:
                raise ConfigError("scenario.roles", f"node {nid} outside [0, {self.nodes})")
        if self.train.dataset not in ("blobs", "digits") and not self.train.dataset.endswith(".csv"):
            raise ConfigError("train.dataset", f"unknown dataset {self.train.dataset!r}")
        if self.train.dataset == "blobs" and self.train.samples < self.nodes * 10:
            raise ConfigError("train.samples", "need at least 10 samples per node")
        if self.train.classes < 2:
            raise ConfigError("train.classes", "need at least 2 classes")
        if self.train.features < 1:
            raise ConfigError("train.features", "must be >= 1")
        if not self.train.hidden or any(h < 1 for h in self.train.hidden):
            raise ConfigError("train.hidden", "hidden layer sizes must be positive")
        if self.train.activation not in ACTIVATIONS:
            raise ConfigError("train.activation", f"unknown activation {self.train.activation!r}")
        if self.train.learning_rate <= 0:
            raise ConfigError("train.learning_rate", "must be > 0")
        if self.train.l2_lambda < 0:
            raise ConfigError("train.l2_lambda", "must be >= 0")
        if self.train.local_epochs < 1:
            raise ConfigError("train.local_epochs", "must be >= 1")
        if not 0.0 < self.train.split_ratio < 1.0:
            raise ConfigError("train.split_ratio", "must lie in (0, 1)")
        if self.attack is not None:
            if self.attack.kind not in ("eclipse", "eavesdrop", "network_map"):
                raise ConfigError("attack.kind", f"unknown attack {self.attack.kind!r}")
            if not 0 <= self.attack.target < self.nodes:
                raise ConfigError("attack.target", f"target must lie in [0, {self.nodes})")
            if self.attack.attackers < 1:
                raise ConfigError("attack.attackers", "need at least one attacker")
            if self.attack.start_round < 0:
                raise ConfigError("attack.start_round", "must be >= 0")
        # FabricConfig enforces its own invariants in __post_init__.


_SCENARIO_KEYS = {
    "name",
    "seed",
    "nodes",
    "topology",
    "topology_p",
    "security",
    "rounds",
    "receive_timeout_ms",
    "key_renewal_interval",
    "token_ttl_rounds",
    "mtd_sample_size",
    "mtd_rotation_interval",
    "mtd_ports_per_node",
    "pubkey_renewal_interval",
    "roles",
    "output_dir",
}
_FABRIC_KEYS = {"backend", "sim_latency_ms", "sim_jitter_ms", "sim_loss_rate", "max_frame"}
_TRAIN_KEYS = {
    "dataset",
    "samples",
    "classes",
    "features",
    "spread",
    "hidden",
    "activation",
    "learning_rate",
    "l2_lambda",
    "local_epochs",
    "split_ratio",
}
_ATTACK_KEYS = {"kind", "attackers", "target", "start_round", "end_round"}


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}", "unknown key")


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<toml>", str(exc)) from None
    for section in doc:
        if section not in ("scenario", "fabric", "train", "attack"):
            raise ConfigError(section, "unknown section")
    sc = doc.get("scenario", {})
    _check_keys("scenario", sc, _SCENARIO_KEYS)
    if "name" not in sc:
        raise ConfigError("scenario.name", "required")
    fab = doc.get("fabric", {})
    _check_keys("fabric", fab, _FABRIC_KEYS)
    tr = doc.get("train", {})
    _check_keys("train", tr, _TRAIN_KEYS)

    try:
        security = SecuritySetting(sc.get("security", "baseline"))
    except ValueError:
        raise ConfigError("scenario.security", f"unknown setting {sc.get('security')!r}") from None

    roles: list[tuple[int, Role]] = []
    for nid_text, role_text in sc.get("roles", {}).items():
        try:
            roles.append((int(nid_text), Role(role_text)))
        except ValueError:
            raise ConfigError("scenario.roles", f"bad role entry {nid_text!r} = {role_text!r}") from None

    attack = None
    if "attack" in doc:
        at = doc["attack"]
        _check_keys("attack", at, _ATTACK_KEYS)
        if "kind" not in at:
            raise ConfigError("attack.kind", "required")
        attack = AttackSpec(
            kind=at["kind"],
            attackers=at.get("attackers", 1),
            target=at.get("target", 0),
            start_round=at.get("start_round", 0),
            end_round=at.get("end_round", -1),
        )

    seed = sc.get("seed", 7)
    try:
        fabric = FabricConfig(
            backend=fab.get("backend", "sim"),
            sim_latency_ms=float(fab.get("sim_latency_ms", 5.0)),
            sim_jitter_ms=float(fab.get("sim_jitter_ms", 1.0)),
            sim_loss_rate=float(fab.get("sim_loss_rate", 0.0)),
            max_frame=int(fab.get("max_frame", 1 << 20)),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError("fabric", str(exc)) from None

    train = TrainSpec(
        dataset=tr.get("dataset", "blobs"),
        samples=int(tr.get("samples", 1600)),
        classes=int(tr.get("classes", 4)),
        features=int(tr.get("features", 2)),
        spread=float(tr.get("spread", 0.9)),
        hidden=tuple(int(h) for h in tr.get("hidden", [16])),
        activation=tr.get("activation", "relu"),
        learning_rate=float(tr.get("learning_rate", 0.05)),
        l2_lambda=float(tr.get("l2_lambda", 1e-4)),
        local_epochs=int(tr.get("local_epochs", 3)),
        split_ratio=float(tr.get("split_ratio", 0.8)),
    )

    cfg = ScenarioConfig(
        name=sc["name"],
        seed=int(seed),
        nodes=int(sc.get("nodes", 8)),
        topology=sc.get("topology", "random"),
        topology_p=float(sc.get("topology_p", 0.5)),
        security=security,
        rounds=int(sc.get("rounds", 20)),
        receive_timeout_ms=float(sc.get("receive_timeout_ms", 0.0)),
        key_renewal_interval=int(sc.get("key_renewal_interval", 1)),
        token_ttl_rounds=float(sc.get("token_ttl_rounds", 10.0)),
        mtd_sample_size=int(sc.get("mtd_sample_size", 0)),
        mtd_rotation_interval=int(sc.get("mtd_rotation_interval", 1)),
        mtd_ports_per_node=int(sc.get("mtd_ports_per_node", 16)),
        pubkey_renewal_interval=int(sc.get("pubkey_renewal_interval", 0)),
        roles=tuple(sorted(roles)),
        output_dir=sc.get("output_dir", "runs"),
        fabric=fabric,
        train=train,
        attack=attack,
    )
    cfg.validate()
    return cfg


def load_scenario(path: str | Path) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def to_toml(cfg: ScenarioConfig) -> str:
    """Serialize a config; ``parse_scenario(to_toml(cfg)) == cfg``."""
    lines = ["[scenario]"]
    lines.append(f"name = {_toml_value(cfg.name)}")
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"nodes = {cfg.nodes}")
    lines.append(f"topology = {_toml_value(cfg.topology)}")
    lines.append(f"topology_p = {_toml_value(cfg.topology_p)}")
    lines.append(f"security = {_toml_value(cfg.security.value)}")
    lines.append(f"rounds = {cfg.rounds}")
    lines.append(f"receive_timeout_ms = {_toml_value(cfg.receive_timeout_ms)}")
    lines.append(f"key_renewal_interval = {cfg.key_renewal_interval}")
    lines.append(f"token_ttl_rounds = {_toml_value(cfg.token_ttl_rounds)}")
    lines.append(f"mtd_sample_size = {cfg.mtd_sample_size}")
    lines.append(f"mtd_rotation_interval = {cfg.mtd_rotation_interval}")
    lines.append(f"mtd_ports_per_node = {cfg.mtd_ports_per_node}")
    lines.append(f"pubkey_renewal_interval = {cfg.pubkey_renewal_interval}")
    lines.append(f"output_dir = {_toml_value(cfg.output_dir)}")
    if cfg.roles:
        entries = ", ".join(f'"{nid}" = {_toml_value(role.value)}' for nid, role in cfg.roles)
        lines.append(f"roles = {{ {entries} }}")
    lines += [
        "",
        "[fabric]",
        f"backend = {_toml_value(cfg.fabric.backend)}",
        f"sim_latency_ms = {_toml_value(cfg.fabric.sim_latency_ms)}",
        f"sim_jitter_ms = {_toml_value(cfg.fabric.sim_jitter_ms)}",
        f"sim_loss_rate = {_toml_value(cfg.fabric.sim_loss_rate)}",
        f"max_frame = {cfg.fabric.max_frame}",
        "",
        "[train]",
        f"dataset = {_toml_value(cfg.train.dataset)}",
        f"samples = {cfg.train.samples}",
        f"classes = {cfg.train.classes}",
        f"features = {cfg.train.features}",
        f"spread = {_toml_value(cfg.train.spread)}",
        f"hidden = {_toml_value(list(cfg.train.hidden))}",
        f"activation = {_toml_value(cfg.train.activation)}",
        f"learning_rate = {_toml_value(cfg.train.learning_rate)}",
        f"l2_lambda = {_toml_value(cfg.train.l2_lambda)}",
        f"local_epochs = {cfg.train.local_epochs}",
        f"split_ratio = {_toml_value(cfg.train.split_ratio)}",
    ]
    if cfg.attack is not None:
        lines += [
            "",
            "[attack]",
            f"kind = {_toml_value(cfg.attack.kind)}",
            f"attackers = {cfg.attack.attackers}",
            f"target = {cfg.attack.target}",
            f"start_round = {cfg.attack.start_round}",
            f"end_round = {cfg.attack.end_round}",
        ]
    return "\n".join(lines) + "\n"
