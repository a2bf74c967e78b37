"""The reward pipeline, run in stages over a run directory.

A run directory holds the output of each stage as plain files::

    manifest_summary.json
    rollouts/<instance>/<group>/{main.jsonl,subagent.jsonl,record.json}
    plans/<instance>/<group>.json
    rewards.jsonl
    errors.jsonl

A completed stage leaves a ``.stage-<name>.done`` marker, and is skipped when the
pipeline runs again on the same directory.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import pandas as pd

from .exceptions import TermharnessError
from .orchestrator import (
    error_to_dict,
    load_manifest,
    load_records,
    make_pool,
    run_rollout_batch,
    save_record,
    summarize_manifest,
)
from .rewards import (
    ExecutionPlan,
    compute_reward,
    extract_execution_plan,
    failed_rollout_reward,
    filter_group,
    grade_rubric,
    group_sigma,
    hard_penalty,
)

logger = logging.getLogger(__name__)

ROLLOUT = "rollout"
PLAN = "plan"
GRADE = "grade"
STAGES = (ROLLOUT, PLAN, GRADE)

REWARD_COLUMNS = [
    "instance_id",
    "group_index",
    "value",
    "s_pos_mean",
    "s_pit_mean",
    "s_fa_mean",
    "penalty_applied",
    "kept",
]


def stage_marker(run_dir, stage):
    return os.path.join(run_dir, ".stage-{}.done".format(stage))


def stage_done(run_dir, stage):
    return os.path.exists(stage_marker(run_dir, stage))


def _mark_done(run_dir, stage):
    with open(stage_marker(run_dir, stage), "w"):
        pass


def _append_errors(run_dir, rows):
    if not rows:
        return
    with open(os.path.join(run_dir, "errors.jsonl"), "a", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def run_rollout_stage(run_dir, instances, load_failures, G, parallelism, config, llm, mode, seed=None):
    os.makedirs(run_dir, exist_ok=True)
    summary = summarize_manifest(instances)
    summary["load_failures"] = len(load_failures)
    summary["instance_ids"] = [instance.id for instance in instances]
    _write_json(os.path.join(run_dir, "manifest_summary.json"), summary)
    _append_errors(run_dir, [{"stage": "load", **x} for x in load_failures])
    pool = make_pool(config.pool, parallelism)
    records = run_rollout_batch(instances, G, parallelism, config, llm, mode, pool=pool, seed=seed)
    for record in records:
        save_record(record, run_dir)
    _append_errors(
        run_dir,
        [
            {"stage": ROLLOUT, "instance_id": r.instance_id, "group_index": r.group_index, **r.error}
            for r in records
            if r.failed
        ],
    )
    _mark_done(run_dir, ROLLOUT)
    return records


def plan_path(run_dir, instance_id, group_index):
    return os.path.join(run_dir, "plans", str(instance_id), "{}.json".format(group_index))


def needs_grading(record, reward_config):
    return (
        not record.failed
        and not record.protocol_violation
        and hard_penalty(record.outcome, reward_config) is None
    )


def _extract_plan(record, run_dir, config, llm):
    path = plan_path(run_dir, record.instance_id, record.group_index)
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            return ExecutionPlan.from_dict(json.load(f))
    plan = extract_execution_plan(
        record.outcome,
        llm,
        model=config.gateway.plan_model,
        max_output_tokens=config.gateway.max_output_tokens,
    )
    os.makedirs(os.path.dirname(path), exist_ok=True)
    _write_json(path, plan.to_dict())
    return plan


def run_plan_stage(run_dir, records, config, llm, parallelism):
    """Extract an execution plan for every rollout that will be graded."""
    candidates = [r for r in records if needs_grading(r, config.reward)]

    def extract(record):
        try:
            return _extract_plan(record, run_dir, config, llm), None
        except TermharnessError as e:
            logger.error(
                "No execution plan for %s/%d: %s", record.instance_id, record.group_index, e
            )
            return None, error_row(
                PLAN, e, instance_id=record.instance_id, group_index=record.group_index
            )

    with ThreadPoolExecutor(max_workers=parallelism) as executor:
        results = list(executor.map(extract, candidates))
    _append_errors(run_dir, [error for _, error in results if error])
    _mark_done(run_dir, PLAN)
    return {
        (r.instance_id, r.group_index): plan
        for r, (plan, _) in zip(candidates, results)
        if plan is not None
    }


def reward_for(record, instance, plan, config, llm):
    """Return the reward of a rollout, or None if it is left out of its group."""
    if record.protocol_violation:
        return None
    if record.failed:
        return failed_rollout_reward(config.reward)
    if hard_penalty(record.outcome, config.reward) is not None:
        return compute_reward(None, record.outcome, config.reward)
    if plan is None:
        return None
    scores = grade_rubric(
        plan,
        instance.reference_plan,
        instance.query,
        llm,
        final_answer=record.outcome.response_text,
        model=config.gateway.grader_model,
        max_output_tokens=config.gateway.max_output_tokens,
    )
    return compute_reward(scores, record.outcome, config.reward)


def run_grade_stage(run_dir, records, instances, plans, config, llm, parallelism, out=None):
    """Grade rollouts, filter groups and write ``rewards.jsonl``."""
    by_id = {instance.id: instance for instance in instances}
    records = [r for r in records if r.instance_id in by_id]

    def grade(record):
        key = (record.instance_id, record.group_index)
        try:
            return reward_for(record, by_id[record.instance_id], plans.get(key), config, llm), None
        except TermharnessError as e:
            logger.error("Could not grade %s/%d: %s", record.instance_id, record.group_index, e)
            return None, error_row(GRADE, e, instance_id=key[0], group_index=key[1])

    with ThreadPoolExecutor(max_workers=parallelism) as executor:
        results = list(executor.map(grade, records))
    _append_errors(run_dir, [error for _, error in results if error])
    rows = [
        {"instance_id": r.instance_id, "group_index": r.group_index, **reward.to_dict()}
        for r, (reward, _) in zip(records, results)
        if reward is not None
    ]
    rewards = _filter_groups(pd.DataFrame(rows, columns=REWARD_COLUMNS + ["graded"]), config)
    write_rewards(rewards, out or os.path.join(run_dir, "rewards.jsonl"))
    _mark_done(run_dir, GRADE)
    return rewards


def _filter_groups(rewards, config):
    rewards = rewards.sort_values(["instance_id", "group_index"]).reset_index(drop=True)
    kept = {}
    for instance_id, frame in rewards.groupby("instance_id"):
        values = frame["value"].tolist()
        kept[instance_id] = len(values) >= 2 and filter_group(values, config.reward)
        logger.info(
            "Group %s: sigma %.4f, %s",
            instance_id,
            group_sigma(values),
            "kept" if kept[instance_id] else "discarded",
        )
    rewards["kept"] = rewards["instance_id"].map(kept).astype(bool)
    return rewards


def write_rewards(rewards, path):
    with open(path, "w", encoding="utf-8") as f:
        for row in rewards[REWARD_COLUMNS].to_dict(orient="records"):
            f.write(json.dumps(_plain(row), sort_keys=True) + "\n")


def read_rewards(path):
    return pd.read_json(path, lines=True, dtype={"instance_id": str})


def _plain(row):
    result = {}
    for key, value in row.items():
        if hasattr(value, "item"):
            value = value.item()
        if isinstance(value, float) and value != value:
            value = None
        result[key] = value
    return result


def run_pipeline(manifest_path, run_dir, config, llm, G, parallelism, mode, seed=None):
    """Run rollout, plan and grade stages, skipping those already done.

    Returns a summary; ``kept_groups`` is the number of groups that survived the
    group filter.
    """
    os.makedirs(run_dir, exist_ok=True)
    if stage_done(run_dir, ROLLOUT):
        logger.info("Skipping the rollout stage; it is already done")
        instances = _loaded_instances(manifest_path, run_dir)
        records = load_records(run_dir)
    else:
        instances, load_failures = load_manifest(manifest_path)
        records = run_rollout_stage(
            run_dir, instances, load_failures, G, parallelism, config, llm, mode, seed
        )
    rewards_path = os.path.join(run_dir, "rewards.jsonl")
    if stage_done(run_dir, GRADE):
        logger.info("Skipping the plan and grade stages; they are already done")
        rewards = read_rewards(rewards_path)
    else:
        if stage_done(run_dir, PLAN):
            logger.info("Skipping the plan stage; it is already done")
            plans = _load_plans(run_dir, records, config)
        else:
            plans = run_plan_stage(run_dir, records, config, llm, parallelism)
        rewards = run_grade_stage(run_dir, records, instances, plans, config, llm, parallelism)
    groups = rewards.groupby("instance_id")["kept"].first() if len(rewards) else pd.Series(dtype=bool)
    return {
        "instances": len(instances),
        "records": len(records),
        "reward_rows": int(len(rewards)),
        "groups": int(len(groups)),
        "kept_groups": int(groups.sum()),
    }


def _loaded_instances(manifest_path, run_dir):
    """The instances that loaded when the rollout stage ran."""
    instances, _ = load_manifest(manifest_path, check_patches=False)
    with open(os.path.join(run_dir, "manifest_summary.json"), encoding="utf-8") as f:
        loaded = set(json.load(f)["instance_ids"])
    return [instance for instance in instances if instance.id in loaded]


def _load_plans(run_dir, records, config):
    plans = {}
    for record in records:
        path = plan_path(run_dir, record.instance_id, record.group_index)
        if needs_grading(record, config.reward) and os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                plans[(record.instance_id, record.group_index)] = ExecutionPlan.from_dict(
                    json.load(f)
                )
    return plans


def error_row(stage, error, **keys):
    return {"stage": stage, **keys, **error_to_dict(error)}
