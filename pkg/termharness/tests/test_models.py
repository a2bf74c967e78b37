import os
import tempfile
from unittest import TestCase

import numpy as np

from termharness.models import (
    ASSISTANT,
    SYSTEM,
    TOOL,
    USER,
    ChatMessage,
    FinalAnswerEntry,
    SubagentQuery,
    ToolCall,
    Trajectory,
    parse_final_answer,
)


class ChatMessageTestCase(TestCase):
    def test_tool_calls_only_on_assistant_messages(self):
        with self.assertRaises(ValueError):
            ChatMessage(role=USER, tool_calls=(ToolCall(id="1", name="Terminal"),))

    def test_tool_message_needs_tool_call_id(self):
        with self.assertRaises(ValueError):
            ChatMessage(role=TOOL, content="output")

    def test_tool_call_id_only_on_tool_messages(self):
        with self.assertRaises(ValueError):
            ChatMessage(role=ASSISTANT, content="hi", tool_call_id="1")

    def test_negative_token_count(self):
        with self.assertRaises(ValueError):
            ChatMessage(role=USER, content="hi", token_count=-1)

    def test_unknown_role(self):
        with self.assertRaises(ValueError):
            ChatMessage(role="developer", content="hi")

    def test_tool_call_needs_name(self):
        with self.assertRaises(ValueError):
            ToolCall(id="1", name="")


class TrajectoryTestCase(TestCase):
    def setUp(self):
        self.trajectory = Trajectory(
            messages=[
                ChatMessage(role=SYSTEM, content="sys", token_count=3),
                ChatMessage(role=USER, content="query", token_count=5),
                ChatMessage(
                    role=ASSISTANT,
                    tool_calls=(ToolCall(id="c1", name="Terminal", arguments={"command": "ls"}),),
                    token_count=7,
                ),
                ChatMessage(role=TOOL, content="a.txt", tool_call_id="c1", token_count=2),
            ],
            meta={"instance_id": "x", "role": "main"},
        )

    def test_total_tokens(self):
        self.assertEqual(self.trajectory.total_tokens, 17)

    def test_empty_trajectory_has_no_tokens(self):
        self.assertEqual(Trajectory().total_tokens, 0)

    def test_first_message_must_be_system(self):
        with self.assertRaises(ValueError):
            Trajectory(messages=[ChatMessage(role=USER, content="query")])

    def test_tool_calls(self):
        self.assertEqual([c.name for c in self.trajectory.tool_calls], ["Terminal"])

    def test_with_meta_keeps_messages(self):
        trajectory = self.trajectory.with_meta(model="m")
        self.assertEqual(trajectory.meta["model"], "m")
        self.assertEqual(trajectory.meta["role"], "main")
        self.assertEqual(trajectory.messages, self.trajectory.messages)

    def test_save_and_load(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, "main.jsonl")
            self.trajectory.save(path)
            self.assertEqual(Trajectory.load(path), self.trajectory)

    def test_jsonl_has_header_and_one_line_per_message(self):
        self.assertEqual(len(self.trajectory.dumps().splitlines()), 5)


class ParseFinalAnswerTestCase(TestCase):
    def setUp(self):
        self.answer = parse_final_answer(
            "<final_answer>\nCommand: cmake . && make\nSummary: Build unsuccessful. "
            "Excerpt: ...\n</final_answer>"
        )

    def test_well_formed(self):
        self.assertTrue(self.answer.well_formed)

    def test_entries(self):
        self.assertEqual(
            self.answer.entries,
            (FinalAnswerEntry(command="cmake . && make", summary="Build unsuccessful. Excerpt: ..."),),
        )

    def test_render(self):
        self.assertEqual(
            self.answer.render(),
            "<final_answer>\nCommand: cmake . && make\nSummary: Build unsuccessful. "
            "Excerpt: ...\n</final_answer>",
        )


class ParseFinalAnswerEdgeCasesTestCase(TestCase):
    def test_empty_text(self):
        answer = parse_final_answer("")
        self.assertFalse(answer.well_formed)
        self.assertEqual(answer.entries, ())

    def test_none(self):
        self.assertFalse(parse_final_answer(None).well_formed)

    def test_opening_tag_without_closing_tag(self):
        answer = parse_final_answer("<final_answer>\nCommand: ls\nSummary: ok")
        self.assertFalse(answer.well_formed)
        self.assertEqual(answer.raw_text, "")

    def test_closing_tag_before_opening_tag(self):
        self.assertFalse(parse_final_answer("</final_answer> x <final_answer>").well_formed)

    def test_two_tag_pairs(self):
        text = "<final_answer>a</final_answer><final_answer>b</final_answer>"
        self.assertFalse(parse_final_answer(text).well_formed)

    def test_free_form_body(self):
        answer = parse_final_answer("<final_answer>All tests pass.</final_answer>")
        self.assertTrue(answer.well_formed)
        self.assertEqual(answer.entries, ())
        self.assertEqual(answer.raw_text, "All tests pass.")

    def test_text_around_tags_is_ignored(self):
        answer = parse_final_answer(
            "Here it is:\n<final_answer>\nCommand: ls\nSummary: two files\n</final_answer>\nBye"
        )
        self.assertEqual([e.command for e in answer.entries], ["ls"])

    def test_multiline_summary(self):
        answer = parse_final_answer(
            "<final_answer>\nCommand: make\nSummary: Failed.\nerror: foo.h missing\n\n"
            "Command: ls\nSummary: ok\n</final_answer>"
        )
        self.assertEqual(answer.entries[0].summary, "Failed.\nerror: foo.h missing")
        self.assertEqual(answer.entries[1], FinalAnswerEntry(command="ls", summary="ok"))

    def test_command_without_summary_is_skipped(self):
        answer = parse_final_answer(
            "<final_answer>\nCommand: make\nsomething else\nCommand: ls\nSummary: ok\n</final_answer>"
        )
        self.assertEqual([e.command for e in answer.entries], ["ls"])


class SubagentQueryTestCase(TestCase):
    def test_empty_query(self):
        with self.assertRaises(ValueError):
            SubagentQuery(query=" ", description="d")

    def test_empty_description(self):
        with self.assertRaises(ValueError):
            SubagentQuery(query="q", description="")


def _random_text(rng, pieces, max_pieces=12):
    return "".join(str(rng.choice(pieces)) for _ in range(rng.integers(0, max_pieces + 1)))


class ParseFinalAnswerRandomTextTestCase(TestCase):
    pieces = [
        "<final_answer>",
        "</final_answer>",
        "<final_",
        "answer>",
        "Command:",
        "Summary:",
        "\n",
        " ",
        "ls -la",
        "x",
        "é",
    ]

    def test_never_raises(self):
        rng = np.random.default_rng(20)
        for _ in range(1000):
            text = _random_text(rng, self.pieces)
            with self.subTest(text=text):
                answer = parse_final_answer(text)
                if not answer.well_formed:
                    self.assertEqual(answer.raw_text, "")
                    self.assertEqual(answer.entries, ())

    def test_tagged_text_is_kept(self):
        rng = np.random.default_rng(21)
        pieces = [p for p in self.pieces if "<" not in p and ">" not in p]
        for _ in range(300):
            text = _random_text(rng, pieces)
            with self.subTest(text=text):
                answer = parse_final_answer("<final_answer>" + text + "</final_answer>")
                self.assertTrue(answer.well_formed)
                self.assertEqual(answer.raw_text.strip(), text.strip())


class RandomTrajectoryTestCase(TestCase):
    words = ["ls", "make test", "Summary: ok", "\n", "ünïcode", '"quoted"', " "]

    def setUp(self):
        self.rng = np.random.default_rng(22)
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)

    def text(self):
        return _random_text(self.rng, self.words)

    def random_trajectory(self):
        rng = self.rng
        messages = [ChatMessage(role=SYSTEM, content=self.text(), token_count=int(rng.integers(0, 50)))]
        next_id = 0
        for _ in range(rng.integers(0, 8)):
            if rng.random() < 0.3:
                messages.append(ChatMessage(role=USER, content=self.text()))
                continue
            calls = []
            for _ in range(rng.integers(0, 3)):
                calls.append(
                    ToolCall(
                        id="call_{}".format(next_id),
                        name=str(rng.choice(["run_in_terminal", "ExecutionSubagent"])),
                        arguments={"command": self.text()},
                    )
                )
                next_id += 1
            messages.append(
                ChatMessage(
                    role=ASSISTANT,
                    content=self.text(),
                    tool_calls=tuple(calls),
                    token_count=int(rng.integers(0, 500)),
                )
            )
            for call in calls:
                messages.append(ChatMessage(role=TOOL, content=self.text(), tool_call_id=call.id))
        return Trajectory(messages=messages, meta={"instance_id": str(rng.integers(0, 1000))})

    def test_dict_round_trip(self):
        for _ in range(50):
            trajectory = self.random_trajectory()
            self.assertEqual(Trajectory.from_dict(trajectory.to_dict()), trajectory)

    def test_file_round_trip(self):
        path = os.path.join(self.tmpdir.name, "trajectory.jsonl")
        for _ in range(50):
            trajectory = self.random_trajectory()
            trajectory.save(path)
            self.assertEqual(Trajectory.load(path), trajectory)
