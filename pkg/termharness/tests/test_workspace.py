import os
import shutil
import subprocess
import tarfile
import tempfile
import textwrap
from types import SimpleNamespace
from unittest import TestCase, skipUnless

from termharness.exceptions import PatchApplyFailure, WorkspaceSetupFailure
from termharness.workspace import (
    apply_patch,
    check_patch,
    prepare_workspace,
    remove_workspace,
    tree_hash,
)

from .utils import REPO

HAS_GIT = shutil.which("git") is not None

README_PATCH = textwrap.dedent(
    """\
    --- a/README.txt
    +++ b/README.txt
    @@ -1 +1,2 @@
     A tiny repository for rollout tests.
    +Patched before the rollout.
    """
)


def _instance(repo_source, pre_patch="", base_commit=""):
    return SimpleNamespace(
        id="inst/1", repo_source=repo_source, pre_patch=pre_patch, base_commit=base_commit
    )


class PrepareWorkspaceFromDirectoryTestCase(TestCase):
    def setUp(self):
        self.workdir = prepare_workspace(_instance(REPO))
        self.addCleanup(remove_workspace, self.workdir)

    def test_files_are_copied(self):
        self.assertTrue(os.path.exists(os.path.join(self.workdir, "build.sh")))

    def test_workspace_is_a_copy(self):
        self.assertNotEqual(os.path.realpath(self.workdir), os.path.realpath(REPO))

    def test_hash_equals_source_hash(self):
        self.assertEqual(tree_hash(self.workdir), tree_hash(REPO))

    def test_fresh_workspaces_hash_equally(self):
        other = prepare_workspace(_instance(REPO))
        self.addCleanup(remove_workspace, other)
        self.assertNotEqual(other, self.workdir)
        self.assertEqual(tree_hash(other), tree_hash(self.workdir))


class PrepareWorkspaceFromArchiveTestCase(TestCase):
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)
        archive = os.path.join(self.tmpdir.name, "repo.tar.gz")
        with tarfile.open(archive, "w:gz") as tar:
            for name in os.listdir(REPO):
                tar.add(os.path.join(REPO, name), arcname=name)
        self.workdir = prepare_workspace(_instance(archive))
        self.addCleanup(remove_workspace, self.workdir)

    def test_archive_is_unpacked(self):
        self.assertEqual(tree_hash(self.workdir), tree_hash(REPO))


class PrepareWorkspaceErrorsTestCase(TestCase):
    def test_missing_source(self):
        with self.assertRaises(WorkspaceSetupFailure):
            prepare_workspace(_instance("/nonexistent/repo"))

    @skipUnless(HAS_GIT, "git is not installed")
    def test_bad_patch_leaves_nothing_behind(self):
        parent = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, parent)
        with self.assertRaises(PatchApplyFailure):
            prepare_workspace(_instance(REPO, pre_patch="not a patch\n"), parent_dir=parent)
        self.assertEqual(os.listdir(parent), [])


@skipUnless(HAS_GIT, "git is not installed")
class PatchTestCase(TestCase):
    def setUp(self):
        self.workdir = prepare_workspace(_instance(REPO, pre_patch=README_PATCH))
        self.addCleanup(remove_workspace, self.workdir)

    def test_patch_is_applied(self):
        with open(os.path.join(self.workdir, "README.txt")) as f:
            self.assertIn("Patched before the rollout.", f.read())

    def test_hash_changes(self):
        self.assertNotEqual(tree_hash(self.workdir), tree_hash(REPO))

    def test_patch_does_not_apply_twice(self):
        with self.assertRaises(PatchApplyFailure):
            check_patch(self.workdir, README_PATCH)

    def test_failed_apply_changes_nothing(self):
        before = tree_hash(self.workdir)
        with self.assertRaises(PatchApplyFailure):
            apply_patch(self.workdir, README_PATCH)
        self.assertEqual(tree_hash(self.workdir), before)


@skipUnless(HAS_GIT, "git is not installed")
class PrepareWorkspaceFromGitTestCase(TestCase):
    def setUp(self):
        self.source = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.source)
        self.git("init", "--quiet")
        self.write("a.txt", "first\n")
        self.git("add", "a.txt")
        self.git("commit", "--quiet", "-m", "first")
        self.first_commit = self.git("rev-parse", "HEAD").strip()
        self.write("a.txt", "second\n")
        self.git("commit", "--quiet", "-am", "second")
        self.workdir = prepare_workspace(_instance(self.source, base_commit=self.first_commit))
        self.addCleanup(remove_workspace, self.workdir)

    def git(self, *args):
        env = {
            **os.environ,
            "GIT_AUTHOR_NAME": "t",
            "GIT_AUTHOR_EMAIL": "t@example.com",
            "GIT_COMMITTER_NAME": "t",
            "GIT_COMMITTER_EMAIL": "t@example.com",
        }
        return subprocess.run(
            ["git"] + list(args), cwd=self.source, env=env, check=True, capture_output=True, text=True
        ).stdout

    def write(self, name, content):
        with open(os.path.join(self.source, name), "w") as f:
            f.write(content)

    def test_base_commit_is_checked_out(self):
        with open(os.path.join(self.workdir, "a.txt")) as f:
            self.assertEqual(f.read(), "first\n")

    def test_hash_ignores_git_directory(self):
        checkout = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, checkout)
        with open(os.path.join(checkout, "a.txt"), "w") as f:
            f.write("first\n")
        self.assertEqual(tree_hash(self.workdir), tree_hash(checkout))
