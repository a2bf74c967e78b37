import hashlib
import logging
import os
import shutil
import subprocess
import tempfile

from .exceptions import PatchApplyFailure, WorkspaceSetupFailure

logger = logging.getLogger(__name__)

_ARCHIVE_SUFFIXES = (".tar", ".tar.gz", ".tgz", ".tar.bz2", ".tar.xz", ".zip")


def prepare_workspace(instance, parent_dir=None):
    """Create a fresh directory holding the instance's repository state.

    The repository is checked out at ``base_commit`` (for git sources) and
    ``pre_patch`` is applied; the caller owns the directory and removes it with
    ``remove_workspace()``.
    """
    workdir = tempfile.mkdtemp(prefix="termharness-{}-".format(_slug(instance.id)), dir=parent_dir)
    try:
        _populate(instance, workdir)
        if instance.pre_patch:
            apply_patch(workdir, instance.pre_patch)
    except Exception:
        remove_workspace(workdir)
        raise
    return workdir


def remove_workspace(workdir):
    shutil.rmtree(workdir, ignore_errors=True)


def _populate(instance, workdir):
    source = str(instance.repo_source)
    if os.path.isdir(os.path.join(source, ".git")):
        _git(["clone", "--quiet", "--no-hardlinks", source, workdir])
        if instance.base_commit:
            _git(["checkout", "--quiet", "--detach", instance.base_commit], cwd=workdir)
    elif os.path.isdir(source):
        shutil.copytree(source, workdir, dirs_exist_ok=True)
    elif source.endswith(_ARCHIVE_SUFFIXES) and os.path.isfile(source):
        shutil.unpack_archive(source, workdir)
    else:
        raise WorkspaceSetupFailure(
            "Repository source {} is neither a directory nor an archive".format(source),
            repo_source=source,
        )


def _git(args, cwd=None, stdin=None):
    try:
        result = subprocess.run(
            ["git"] + args,
            cwd=cwd,
            input=stdin,
            capture_output=True,
            text=True,
        )
    except OSError as e:
        raise WorkspaceSetupFailure("Could not run git: {}".format(e))
    if result.returncode != 0 and args[0] != "apply":
        raise WorkspaceSetupFailure(
            "git {} failed: {}".format(args[0], result.stderr.strip()), args=args
        )
    return result


def check_patch(workdir, patch):
    """Raise PatchApplyFailure unless ``patch`` applies cleanly, without fuzz."""
    result = _git(["apply", "--check", "--whitespace=nowarn", "-"], cwd=workdir, stdin=patch)
    if result.returncode != 0:
        raise PatchApplyFailure(
            "The patch does not apply: {}".format(result.stderr.strip()),
            workdir=str(workdir),
        )


def apply_patch(workdir, patch):
    check_patch(workdir, patch)
    result = _git(["apply", "--whitespace=nowarn", "-"], cwd=workdir, stdin=patch)
    if result.returncode != 0:
        raise PatchApplyFailure(
            "Applying the patch failed: {}".format(result.stderr.strip()),
            workdir=str(workdir),
        )
    logger.debug("Applied patch in %s", workdir)


def tree_hash(path):
    """Return a digest of the names and contents of all files under ``path``.

    The ``.git`` directory is left out, so that two checkouts of the same state
    hash equally.
    """
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(path):
        dirnames[:] = sorted(d for d in dirnames if d != ".git")
        for filename in sorted(filenames):
            full_path = os.path.join(dirpath, filename)
            relative_path = os.path.relpath(full_path, path).replace(os.sep, "/")
            digest.update(relative_path.encode("utf-8") + b"\0")
            if os.path.islink(full_path):
                digest.update(b"link:" + os.readlink(full_path).encode("utf-8"))
            else:
                with open(full_path, "rb") as f:
                    for chunk in iter(lambda: f.read(65536), b""):
                        digest.update(chunk)
            digest.update(b"\0")
    return digest.hexdigest()


def _slug(text):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in str(text))[:40]
