"""The GRPO objective, evaluated on supplied sequence log-probabilities.

Nothing here trains a model: given the log-probabilities of each rollout under the
current, the sampling and the reference policy, and the rollout rewards, the
functions compute group-normalized advantages, the asymmetrically clipped
surrogate and the KL penalty, so that an objective reported by a trainer can be
checked offline.
"""

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import NonFiniteInput

LOGPROB_COLUMNS = ("logp_new", "logp_old", "logp_ref")
KEY_COLUMNS = ["instance_id", "group_index"]


class GrpoConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    eps_low: float = Field(0.20, gt=0)
    eps_high: float = 0.28
    beta: float = Field(0.02, ge=0)
    group_size: int = Field(8, ge=2)
    sigma_guard: float = Field(1e-8, gt=0)

    @model_validator(mode="after")
    def _check_clip_range(self):
        if self.eps_high < self.eps_low:
            raise ValueError("eps_high must not be smaller than eps_low")
        return self


@dataclass(frozen=True)
class RolloutLogprobs:
    logp_new: float
    logp_old: float
    logp_ref: float
    reward: float

    def __post_init__(self):
        for name in ("logp_new", "logp_old", "logp_ref", "reward"):
            if not math.isfinite(getattr(self, name)):
                raise NonFiniteInput("{} is not finite".format(name), field=name)


@dataclass(frozen=True)
class RolloutTerm:
    advantage: float
    ratio: float
    term: float
    kl: float

    def to_dict(self):
        return {
            "advantage": self.advantage,
            "ratio": self.ratio,
            "term": self.term,
            "kl": self.kl,
        }


@dataclass(frozen=True)
class ObjectiveResult:
    objective: float
    per_rollout: tuple

    def to_dict(self):
        return {
            "objective": self.objective,
            "per_rollout": [x.to_dict() for x in self.per_rollout],
        }


def normalize_advantages(rewards, cfg):
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size < 2:
        raise ValueError("A group needs at least two rewards")
    if np.ptp(rewards) == 0:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / max(rewards.std(), cfg.sigma_guard)


def clipped_term(ratio, advantage, cfg):
    clipped_ratio = min(max(ratio, 1 - cfg.eps_low), 1 + cfg.eps_high)
    return min(ratio * advantage, clipped_ratio * advantage)


def kl_estimate(logp_new, logp_ref):
    """Non-negative estimate of KL(new || ref) from one sampled sequence.

    With t = logp_ref - logp_new, this is exp(t) - t - 1.
    """
    t = logp_ref - logp_new
    try:
        return max(math.expm1(t) - t, 0.0)
    except OverflowError:
        return math.inf


def clipped_objective(group, cfg):
    group = list(group)
    advantages = normalize_advantages([x.reward for x in group], cfg)
    per_rollout = []
    for rollout, advantage in zip(group, advantages):
        try:
            ratio = math.exp(rollout.logp_new - rollout.logp_old)
        except OverflowError:
            ratio = math.inf
        per_rollout.append(
            RolloutTerm(
                advantage=float(advantage),
                ratio=ratio,
                term=clipped_term(ratio, float(advantage), cfg),
                kl=kl_estimate(rollout.logp_new, rollout.logp_ref),
            )
        )
    terms = np.array([x.term for x in per_rollout])
    kls = np.array([x.kl for x in per_rollout])
    with np.errstate(invalid="ignore", over="ignore"):
        objective = float(terms.mean() - cfg.beta * kls.mean())
    if not math.isfinite(objective):
        raise NonFiniteInput("The objective is not finite", objective=str(objective))
    return ObjectiveResult(objective=objective, per_rollout=tuple(per_rollout))


def evaluate_objective(rewards, logprobs, cfg):
    """Evaluate the objective of a training step from exported tables.

    ``rewards`` has the columns of ``rewards.jsonl`` (groups whose ``kept`` is
    false are left out); ``logprobs`` has ``instance_id``, ``group_index`` and the
    three log-probability columns. The step objective is the mean of the group
    objectives.
    """
    if "kept" in rewards.columns:
        rewards = rewards[rewards["kept"].astype(bool)]
    missing = [c for c in LOGPROB_COLUMNS if c not in logprobs.columns]
    if missing:
        raise ValueError("The log-probabilities lack the columns {}".format(", ".join(missing)))
    merged = pd.merge(
        rewards[KEY_COLUMNS + ["value"]], logprobs, on=KEY_COLUMNS, how="inner"
    ).sort_values(KEY_COLUMNS)
    groups = []
    for instance_id, frame in merged.groupby("instance_id", sort=True):
        result = clipped_objective(
            [
                RolloutLogprobs(
                    logp_new=float(row.logp_new),
                    logp_old=float(row.logp_old),
                    logp_ref=float(row.logp_ref),
                    reward=float(row.value),
                )
                for row in frame.itertuples(index=False)
            ],
            cfg,
        )
        groups.append(
            {
                "instance_id": instance_id,
                "objective": result.objective,
                "per_rollout": [
                    {"group_index": int(g), **term.to_dict()}
                    for g, term in zip(frame["group_index"], result.per_rollout)
                ],
            }
        )
    objective = float(np.mean([g["objective"] for g in groups])) if groups else None
    return {"objective": objective, "groups": groups}
