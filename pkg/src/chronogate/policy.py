"""
The delayed-DNS rule: refuse names whose registration is younger than a
threshold, allow everything else.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional

from .config import ConfigError, as_bool, as_float, as_int, read_domain_list
from .domain_age import AgeSource, AgeVerdict


class Action(str, Enum):
    ALLOW = "Allow"
    BLOCK = "Block"
    ALERT_ONLY = "AlertOnly"


class Reason(str, Enum):
    ALLOWLISTED = "Allowlisted"
    YOUNG_DOMAIN = "YoungDomain"
    UNKNOWN_AGE = "UnknownAge"
    OLD_DOMAIN = "OldDomain"


_ACTION_NAMES = {
    "allow": Action.ALLOW,
    "block": Action.BLOCK,
    "alert": Action.ALERT_ONLY,
    "alertonly": Action.ALERT_ONLY,
    "alert_only": Action.ALERT_ONLY,
}


def parse_action(value: str, key: str = "action") -> Action:
    try:
        return _ACTION_NAMES[value.strip().lower().replace("-", "_")]
    except KeyError:
        raise ConfigError(f"{key}: unknown action {value!r}") from None


@dataclass(frozen=True)
class PolicyConfig:
    threshold: dt.timedelta = dt.timedelta(hours=24)
    young_action: Action = Action.BLOCK
    unknown_action: Action = Action.ALLOW
    soa_heuristic_trusted: bool = False
    allowlist: frozenset = field(default_factory=frozenset)
    block_ttl: int = 60

    def __post_init__(self) -> None:
        if self.threshold <= dt.timedelta(0):
            raise ConfigError("threshold must be positive")
        if self.young_action is Action.ALLOW:
            raise ConfigError("young_action must be Block or AlertOnly")
        if self.block_ttl < 0:
            raise ConfigError("block_ttl must be non-negative")
        if self.block_ttl > self.threshold.total_seconds():
            raise ConfigError("block_ttl may not exceed the threshold")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base_dir: Optional[Path] = None) -> "PolicyConfig":
        kwargs: dict = {}
        if "threshold_hours" in values:
            kwargs["threshold"] = dt.timedelta(hours=as_float(values["threshold_hours"], "threshold_hours"))
        if "young_action" in values:
            kwargs["young_action"] = parse_action(values["young_action"], "young_action")
        if "unknown_action" in values:
            kwargs["unknown_action"] = parse_action(values["unknown_action"], "unknown_action")
        if "trust_soa_heuristic" in values:
            kwargs["soa_heuristic_trusted"] = as_bool(values["trust_soa_heuristic"], "trust_soa_heuristic")
        if "block_ttl_seconds" in values:
            kwargs["block_ttl"] = as_int(values["block_ttl_seconds"], "block_ttl_seconds")
        if values.get("allowlist_path"):
            path = Path(values["allowlist_path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            kwargs["allowlist"] = read_domain_list(path)
        return cls(**kwargs)

    def with_threshold_hours(self, hours: float) -> "PolicyConfig":
        return replace(self, threshold=dt.timedelta(hours=hours))


@dataclass(frozen=True)
class PolicyVerdict:
    action: Action
    reason: Reason
    age: Optional[dt.timedelta] = None

    def as_dict(self) -> dict:
        return {
            "action": self.action.value,
            "reason": self.reason.value,
            "age_hours": None if self.age is None else self.age.total_seconds() / 3600,
        }


def is_allowlisted(domain: str, allowlist: frozenset) -> bool:
    labels = domain.split(".")
    return any(".".join(labels[i:]) in allowlist for i in range(len(labels)))


def evaluate(domain: str, verdict: AgeVerdict, cfg: PolicyConfig) -> PolicyVerdict:
    """Map a domain's age verdict to an enforcement decision.

    Blocking is strict: a domain exactly ``threshold`` old is allowed.  SOA
    heuristic ages only count when ``soa_heuristic_trusted`` is set.
    """
    if cfg.allowlist and is_allowlisted(domain, cfg.allowlist):
        return PolicyVerdict(Action.ALLOW, Reason.ALLOWLISTED, verdict.age)
    usable = verdict.known and (
        verdict.source is not AgeSource.SOA_HEURISTIC or cfg.soa_heuristic_trusted
    )
    if not usable:
        return PolicyVerdict(cfg.unknown_action, Reason.UNKNOWN_AGE, verdict.age)
    if verdict.age < cfg.threshold:
        return PolicyVerdict(cfg.young_action, Reason.YOUNG_DOMAIN, verdict.age)
    return PolicyVerdict(Action.ALLOW, Reason.OLD_DOMAIN, verdict.age)
