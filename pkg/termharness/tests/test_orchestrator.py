import json
import os
import secrets
import shutil
import tempfile
from collections import Counter
from unittest import TestCase

from termharness.exceptions import ConfigConflict
from termharness.gateway import ScriptedGateway
from termharness.models import ASSISTANT, SYSTEM, TOOL, USER
from termharness.orchestrator import (
    EXECUTION_SUBAGENT,
    LLM,
    MainAgentConfig,
    RolloutRecord,
    TaskInstance,
    load_manifest,
    load_records,
    passthrough_main_agent,
    register_subagent_tool,
    run_rollout,
    run_rollout_batch,
    save_record,
    summarize_manifest,
    wrap_query,
)
from termharness.rewards import ExecutionPlan
from termharness.terminal import LocalExecutor
from termharness.tokens import count_message, get_counter
from termharness.workspace import tree_hash

from .utils import MANIFEST, REPO, SCRIPTED, scripted_config, terminal_call

PLAN = ExecutionPlan(task_outcome="success", outcome_summary="Done")
FINAL_ANSWER = "<final_answer>\nCommand: cat README.txt\nSummary: One line.\n</final_answer>"


def _instance(**kwargs):
    values = {
        "id": "readme",
        "repo_source": REPO,
        "query": "Run cat README.txt and report what it says.",
        "reference_plan": PLAN,
    }
    values.update(kwargs)
    return TaskInstance(**values)


def _subagent_script(command="cat README.txt", answer=FINAL_ANSWER):
    return {
        "model": "terminus-4b",
        "turns": [
            {"respond": {"tool_calls": [terminal_call(command)]}},
            {"respond": {"content": answer}},
        ],
    }


class LoadManifestTestCase(TestCase):
    def setUp(self):
        self.instances, self.failures = load_manifest(MANIFEST)

    def test_instances(self):
        self.assertEqual([x.id for x in self.instances], ["build", "linter"])
        self.assertEqual(self.failures, [])

    def test_repo_source_is_relative_to_manifest(self):
        self.assertEqual(self.instances[0].repo_source, REPO)

    def test_reference_plan_from_text(self):
        plan = self.instances[0].reference_plan
        self.assertEqual(plan.task_outcome, "success")
        self.assertEqual(plan.commands_executed[0].command, "sh build.sh")

    def test_reference_plan_from_mapping(self):
        self.assertEqual(self.instances[1].reference_plan.commands_executed[0].exit_code, 1)

    def test_summary(self):
        self.assertEqual(
            summarize_manifest(self.instances),
            {"total": 2, "by_language": {"python": 1, "shell": 1}},
        )


class LoadManifestFailuresTestCase(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        good = {"id": "a", "repo_source": REPO, "query": "q", "reference_plan": PLAN.to_dict()}
        lines = [
            json.dumps(good),
            "{not json",
            json.dumps({"id": "b", "repo_source": REPO, "query": "q"}),
            json.dumps(good),
            "",
            json.dumps({**good, "id": "c", "repo_source": "/nonexistent"}),
        ]
        path = os.path.join(self.tmpdir.name, "manifest.jsonl")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        self.instances, self.failures = load_manifest(path)

    def test_good_instances_load(self):
        self.assertEqual([x.id for x in self.instances], ["a"])

    def test_failures(self):
        self.assertEqual(
            [(f["line"], f["instance_id"], f["kind"]) for f in self.failures],
            [
                (2, None, "JSONDecodeError"),
                (3, "b", "ManifestError"),
                (4, "a", "ManifestError"),
                (6, "c", "WorkspaceSetupFailure"),
            ],
        )


class WrapQueryTestCase(TestCase):
    def test_query_is_embedded_verbatim(self):
        self.assertIn("<query>\nls -la\n</query>", wrap_query("ls -la"))

    def test_empty_query(self):
        with self.assertRaises(ValueError):
            wrap_query(" ")


class PassthroughTestCase(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        shutil.copy(os.path.join(REPO, "README.txt"), self.tmpdir.name)
        self.term = LocalExecutor(self.tmpdir.name)
        self.config = scripted_config()
        self.instance = _instance()
        llm = ScriptedGateway([_subagent_script()])
        self.record = passthrough_main_agent(self.instance, self.config, llm, self.term)
        self.messages = self.record.main_trajectory.messages

    def test_main_trajectory_roles(self):
        self.assertEqual([m.role for m in self.messages], [SYSTEM, USER, ASSISTANT, TOOL])

    def test_forwards_exact_query(self):
        (call,) = self.messages[2].tool_calls
        self.assertEqual(call.name, EXECUTION_SUBAGENT)
        self.assertEqual(call.arguments["query"], self.instance.query)

    def test_main_agent_sees_only_the_final_answer(self):
        self.assertEqual(self.messages[3].content, FINAL_ANSWER)

    def test_subagent_ran_the_command(self):
        self.assertIn(b"tiny repository", self.record.outcome.commands[0][1].output)

    def test_not_a_protocol_violation(self):
        self.assertFalse(self.record.protocol_violation)

    def test_forwarding_turn_counts_its_arguments(self):
        forwarding = self.messages[2]
        self.assertEqual(forwarding.token_count, count_message(forwarding, get_counter()))
        self.assertGreater(forwarding.token_count, get_counter().count(self.instance.query))


class PassthroughLlmModeTestCase(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        self.term = LocalExecutor(self.tmpdir.name)
        self.config = scripted_config()
        self.instance = _instance(query="Run ls and report the files.")

    def main_script(self, query):
        return {
            "model": "main-agent",
            "turns": [
                {
                    "expect": {"tools": [EXECUTION_SUBAGENT]},
                    "respond": {
                        "tool_calls": [
                            {"name": EXECUTION_SUBAGENT, "arguments": {"query": query, "description": "ls"}}
                        ]
                    },
                }
            ],
        }

    def test_rewritten_query_is_a_protocol_violation(self):
        llm = ScriptedGateway([self.main_script("List the files, please.")])
        record = passthrough_main_agent(self.instance, self.config, llm, self.term, mode=LLM)
        self.assertTrue(record.protocol_violation)
        self.assertIsNone(record.outcome)

    def test_exact_query_runs_the_subagent(self):
        llm = ScriptedGateway(
            [self.main_script(self.instance.query), _subagent_script(command="ls")]
        )
        record = passthrough_main_agent(self.instance, self.config, llm, self.term, mode=LLM)
        self.assertFalse(record.protocol_violation)
        self.assertEqual(record.outcome.commands[0][0].command, "ls")
        self.assertEqual(record.main_trajectory.meta["model"], "main-agent")

    def test_unknown_mode(self):
        with self.assertRaises(ValueError):
            passthrough_main_agent(self.instance, self.config, None, self.term, mode="random")


class ContextIsolationTestCase(TestCase):
    def setUp(self):
        self.repo = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.repo)
        self.sentinel = secrets.token_hex(25600)
        with open(os.path.join(self.repo, "blob.txt"), "w") as f:
            f.write(self.sentinel)
        answer = "<final_answer>\nCommand: cat blob.txt\nSummary: Printed a 51200-character hex blob.\n</final_answer>"
        llm = ScriptedGateway([_subagent_script(command="cat blob.txt", answer=answer)])
        instance = _instance(repo_source=self.repo, query="Run cat blob.txt and summarize it.")
        self.record = run_rollout(instance, 0, scripted_config(), llm)

    def test_subagent_saw_the_output(self):
        tool_messages = [m for m in self.record.outcome.trajectory.messages if m.role == TOOL]
        self.assertIn(self.sentinel, tool_messages[0].content)

    def test_sentinel_is_not_in_main_trajectory(self):
        for message in self.record.main_trajectory.messages:
            self.assertNotIn(self.sentinel[:64], message.content)

    def test_main_trajectory_is_small(self):
        main_tokens = self.record.main_trajectory.total_tokens
        subagent_tokens = self.record.outcome.trajectory.total_tokens
        self.assertLess(main_tokens, 0.1 * (main_tokens + subagent_tokens))


class RunRolloutTestCase(TestCase):
    def setUp(self):
        self.config = scripted_config()
        self.llm = ScriptedGateway.from_file(SCRIPTED)
        self.instances, _ = load_manifest(MANIFEST)

    def test_record(self):
        record = run_rollout(self.instances[0], 0, self.config, self.llm)
        self.assertIsNone(record.error)
        self.assertTrue(record.outcome.final_answer.well_formed)
        self.assertEqual(record.workspace_hash, tree_hash(REPO))
        self.assertGreaterEqual(record.wall_clock_ms, 0)

    def test_workspace_is_removed(self):
        record = run_rollout(self.instances[0], 0, self.config, self.llm)
        self.assertFalse(os.path.exists(record.workspace))

    def test_failure_is_recorded(self):
        instance = _instance(repo_source="/nonexistent/repo")
        record = run_rollout(instance, 2, self.config, self.llm)
        self.assertTrue(record.failed)
        self.assertEqual(record.error["kind"], "WorkspaceSetupFailure")
        self.assertEqual(record.group_index, 2)

    def test_script_failure_is_recorded(self):
        record = run_rollout(_instance(), 0, self.config, self.llm)
        self.assertEqual(record.error["kind"], "ScriptExhausted")


class RunRolloutBatchTestCase(TestCase):
    def setUp(self):
        instances, _ = load_manifest(MANIFEST)
        llm = ScriptedGateway.from_file(SCRIPTED)
        self.records = run_rollout_batch(instances, 4, 3, scripted_config(), llm)

    def test_order(self):
        self.assertEqual(
            [(r.instance_id, r.group_index) for r in self.records],
            [("build", g) for g in range(4)] + [("linter", g) for g in range(4)],
        )

    def test_group_starts_from_identical_workspaces(self):
        self.assertEqual(len({r.workspace_hash for r in self.records}), 1)

    def test_variants_alternate(self):
        well_formed = [r.outcome.final_answer.well_formed for r in self.records[:4]]
        self.assertEqual(well_formed, [True, False, True, False])

    def test_bad_group_size(self):
        with self.assertRaises(ValueError):
            run_rollout_batch([], 0, 1, scripted_config(), None)


class RolloutBatchParallelismTestCase(TestCase):
    def setUp(self):
        instances, _ = load_manifest(MANIFEST)
        llm = ScriptedGateway.from_file(SCRIPTED)
        self.outcomes = {
            parallelism: Counter(
                (r.instance_id, r.outcome.final_answer.well_formed)
                for r in run_rollout_batch(instances, 8, parallelism, scripted_config(), llm)
            )
            for parallelism in (1, 8)
        }

    def test_same_outcomes(self):
        self.assertEqual(self.outcomes[1], self.outcomes[8])

    def test_outcomes(self):
        self.assertEqual(
            self.outcomes[8],
            Counter({("build", True): 4, ("build", False): 4, ("linter", True): 8}),
        )


class RecordStorageTestCase(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        instances, _ = load_manifest(MANIFEST)
        self.record = run_rollout(instances[0], 1, scripted_config(), ScriptedGateway.from_file(SCRIPTED))
        self.failed = RolloutRecord(instance_id="build", group_index=0, error={"kind": "X", "message": ""})
        save_record(self.record, self.tmpdir.name)
        save_record(self.failed, self.tmpdir.name)
        self.loaded = load_records(self.tmpdir.name)

    def test_files(self):
        directory = os.path.join(self.tmpdir.name, "rollouts", "build", "1")
        self.assertEqual(sorted(os.listdir(directory)), ["main.jsonl", "record.json", "subagent.jsonl"])

    def test_records_load_in_order(self):
        self.assertEqual([r.group_index for r in self.loaded], [0, 1])

    def test_record_round_trip(self):
        self.assertEqual(self.loaded[1], self.record)

    def test_failed_record(self):
        self.assertTrue(self.loaded[0].failed)
        self.assertIsNone(self.loaded[0].outcome)


class RegisterSubagentToolTestCase(TestCase):
    def test_subagent_and_terminal(self):
        registration = register_subagent_tool(
            MainAgentConfig.from_preset("subagent_terminal", system_prompt="Base prompt.")
        )
        self.assertEqual(registration.tool_names, [EXECUTION_SUBAGENT, "Terminal"])
        self.assertTrue(registration.system_prompt.startswith("Base prompt.\n\n== Using ExecutionSubagent =="))
        self.assertIn(
            "Don't call ExecutionSubagent multiple times in parallel.", registration.system_prompt
        )

    def test_terminal_only(self):
        registration = register_subagent_tool(
            MainAgentConfig.from_preset("terminal_only", system_prompt="Base prompt.")
        )
        self.assertEqual(registration.tool_names, ["Terminal"])
        self.assertEqual(registration.system_prompt, "Base prompt.")

    def test_subagent_only(self):
        registration = register_subagent_tool(MainAgentConfig.from_preset("subagent_only"))
        self.assertEqual(registration.tool_names, [EXECUTION_SUBAGENT])

    def test_no_tools(self):
        with self.assertRaises(ConfigConflict):
            register_subagent_tool(MainAgentConfig(use_subagent=False, use_terminal=False))

    def test_unknown_preset(self):
        with self.assertRaises(ConfigConflict):
            MainAgentConfig.from_preset("everything")

    def test_subagent_schema(self):
        registration = register_subagent_tool(MainAgentConfig.from_preset("subagent_only"))
        parameters = registration.tools[0]["function"]["parameters"]
        self.assertEqual(parameters["required"], ["query", "description"])
