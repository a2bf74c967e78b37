import io
import json
import os
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from unittest import TestCase

from termharness.cli import main

from .test_metrics import main_trajectory
from .utils import MANIFEST, REPO, SCRIPTED


class CliMixin:
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        self.config = self.path("termharness.yaml")
        with open(self.config, "w") as f:
            f.write("gateway:\n  backend: scripted\n  fixture: {}\n".format(json.dumps(SCRIPTED)))

    def path(self, *parts):
        return os.path.join(self.tmpdir.name, *parts)

    def run_main(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with redirect_stdout(stdout), redirect_stderr(stderr):
            exit_code = main(["--config", self.config, *argv])
        return exit_code, stdout.getvalue(), stderr.getvalue()


class SubagentCommandTestCase(CliMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.exit_code, self.stdout, _ = self.run_main(
            "subagent",
            "--query",
            "Run sh build.sh and report whether the build succeeds.",
            "--workdir",
            REPO,
            "--out",
            self.path("session"),
        )

    def test_exit_code(self):
        self.assertEqual(self.exit_code, 0)

    def test_prints_final_answer(self):
        self.assertIn("Command: sh build.sh", self.stdout)

    def test_files(self):
        self.assertEqual(
            sorted(os.listdir(self.path("session"))),
            ["commands.json", "final_answer.txt", "trajectory.jsonl"],
        )

    def test_commands(self):
        with open(self.path("session", "commands.json")) as f:
            commands = json.load(f)
        self.assertEqual(len(commands), 1)
        self.assertEqual(commands[0]["command"]["command"], "sh build.sh")


class SubagentCommandErrorsTestCase(CliMixin, TestCase):
    def test_missing_workdir(self):
        exit_code, _, stderr = self.run_main(
            "subagent", "--query", "Run sh build.sh", "--workdir", self.path("nowhere")
        )
        self.assertEqual(exit_code, 1)
        self.assertEqual(json.loads(stderr.splitlines()[-1])["kind"], "WorkdirMissing")

    def test_no_script_for_query(self):
        exit_code, _, stderr = self.run_main(
            "subagent", "--query", "Run make test", "--workdir", REPO, "--out", self.path("session")
        )
        self.assertEqual(exit_code, 1)
        self.assertIn('"kind": "ScriptExhausted"', stderr)

    def test_usage_error(self):
        with self.assertRaises(SystemExit) as cm:
            self.run_main("subagent", "--query", "ls")
        self.assertEqual(cm.exception.code, 2)

    def test_help(self):
        with self.assertRaises(SystemExit) as cm:
            self.run_main("pipeline", "--help")
        self.assertEqual(cm.exception.code, 0)

    def test_gateway_unreachable(self):
        with open(self.config, "w") as f:
            f.write("gateway:\n  base_url: http://127.0.0.1:9/v1\n  retries: 0\n")
        exit_code, _, stderr = self.run_main(
            "subagent", "--query", "Run true", "--workdir", REPO, "--out", self.path("session")
        )
        self.assertEqual(exit_code, 1)
        self.assertIn('"kind": "GatewayFailure"', stderr)


class PipelineCommandTestCase(CliMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.exit_code, stdout, _ = self.run_main(
            "pipeline", "--manifest", MANIFEST, "--group-size", "4", "--out", self.path("run")
        )
        self.summary = json.loads(stdout)

    def test_exit_code(self):
        self.assertEqual(self.exit_code, 0)

    def test_summary(self):
        self.assertEqual(self.summary["reward_rows"], 8)
        self.assertEqual(self.summary["kept_groups"], 1)

    def test_grade_again_with_other_alpha(self):
        exit_code, stdout, _ = self.run_main(
            "grade",
            "--rollouts",
            self.path("run"),
            "--manifest",
            MANIFEST,
            "--alpha",
            "1",
            "--out",
            self.path("rewards.jsonl"),
        )
        self.assertEqual(exit_code, 0)
        self.assertEqual(json.loads(stdout), {"rows": 8, "kept_rows": 4})
        with open(self.path("rewards.jsonl")) as f:
            values = [json.loads(line)["value"] for line in f]
        self.assertEqual(values[:2], [90.0, -100.0])


class NoGroupKeptTestCase(CliMixin, TestCase):
    def test_exit_code(self):
        manifest = self.path("manifest.jsonl")
        with open(MANIFEST) as f:
            linter = json.loads(f.readlines()[1])
        linter["repo_source"] = REPO
        with open(manifest, "w") as f:
            f.write(json.dumps(linter) + "\n")
        exit_code, _, stderr = self.run_main(
            "pipeline", "--manifest", manifest, "--group-size", "2", "--out", self.path("run")
        )
        self.assertEqual(exit_code, 1)
        self.assertIn('"kind": "NoGroupKept"', stderr)


class GrpoEvalCommandTestCase(CliMixin, TestCase):
    def setUp(self):
        super().setUp()
        with open(self.path("rewards.jsonl"), "w") as f:
            for g, value in enumerate([80.0, -100.0]):
                f.write(
                    json.dumps(
                        {"instance_id": "build", "group_index": g, "value": value, "kept": True}
                    )
                    + "\n"
                )
        with open(self.path("logprobs.jsonl"), "w") as f:
            for g in range(2):
                f.write(
                    json.dumps(
                        {
                            "instance_id": "build",
                            "group_index": g,
                            "logp_new": -7.0,
                            "logp_old": -7.0,
                            "logp_ref": -7.0,
                        }
                    )
                    + "\n"
                )
        self.exit_code, stdout, _ = self.run_main(
            "grpo-eval",
            "--rewards",
            self.path("rewards.jsonl"),
            "--logprobs",
            self.path("logprobs.jsonl"),
            "--out",
            self.path("objective.json"),
        )
        self.printed = json.loads(stdout)

    def test_exit_code(self):
        self.assertEqual(self.exit_code, 0)

    def test_on_policy_objective_is_zero(self):
        self.assertAlmostEqual(self.printed["objective"], 0.0, places=12)
        self.assertEqual(self.printed["groups"], 1)

    def test_out_file(self):
        with open(self.path("objective.json")) as f:
            result = json.load(f)
        self.assertEqual(len(result["groups"][0]["per_rollout"]), 2)


class ReportCommandTestCase(CliMixin, TestCase):
    def setUp(self):
        super().setUp()
        directory = self.path("runs", "terminal_only", "a")
        os.makedirs(directory)
        main_trajectory([["Terminal"]]).save(os.path.join(directory, "main.jsonl"))
        with open(self.path("tags.json"), "w") as f:
            json.dump({"frontier-model": "frontier"}, f)
        self.exit_code, self.stdout, _ = self.run_main(
            "report",
            "--runs",
            self.path("runs"),
            "--model-tags",
            self.path("tags.json"),
            "--out",
            self.path("report.md"),
        )

    def test_exit_code(self):
        self.assertEqual(self.exit_code, 0)

    def test_markdown(self):
        with open(self.path("report.md")) as f:
            self.assertEqual(f.read(), self.stdout)
        self.assertIn("| terminal_only |", self.stdout)
