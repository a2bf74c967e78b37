import base64
import itertools
import logging
import os
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass

from .exceptions import SpawnFailure, WorkdirMissing

logger = logging.getLogger(__name__)

SYNC = "sync"
ASYNC = "async"
MODES = (SYNC, ASYNC)

OUTPUT_LIMIT = 61440
TIMEOUT_EXIT_CODE = 999
TRUNCATION_MARKER = b"\n\n[... output truncated ...]\n\n"

# After the shell exits, processes it left in the background may still hold the
# output pipe open; they get this long before the process group is killed.
_STRAGGLER_GRACE_SECONDS = 1.0
_READ_CHUNK = 65536


@dataclass(frozen=True)
class TerminalCommand:
    command: str
    mode: str = SYNC
    timeout_ms: int = 30000
    workdir: str = "."

    def __post_init__(self):
        if not self.command.strip():
            raise ValueError("The command must not be empty")
        if self.mode not in MODES:
            raise ValueError('"{}" is not a valid terminal mode'.format(self.mode))
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")

    def to_dict(self):
        return {
            "command": self.command,
            "mode": self.mode,
            "timeout_ms": self.timeout_ms,
            "workdir": str(self.workdir),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class TerminalResult:
    exit_code: int
    output: bytes = b""
    truncated: bool = False
    duration_ms: int = 0
    timed_out: bool = False
    handle_id: str = None

    @property
    def text(self):
        return self.output.decode("utf-8", errors="replace")

    @property
    def running(self):
        return self.exit_code is None

    def to_dict(self):
        return {
            "exit_code": self.exit_code,
            "output": base64.b64encode(self.output).decode("ascii"),
            "truncated": self.truncated,
            "duration_ms": self.duration_ms,
            "timed_out": self.timed_out,
            "handle_id": self.handle_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "output": base64.b64decode(d["output"])})


def truncate_output(raw, limit=OUTPUT_LIMIT):
    """Limit output to ``limit`` bytes, keeping its beginning and its end.

    Setup information tends to be at the beginning of command output and errors at
    the end, so when the output is too long its middle is replaced with a marker.
    Returns the (possibly truncated) output and whether it was truncated.
    """
    if len(raw) <= limit:
        return bytes(raw), False
    return _splice(raw[:limit], raw[limit:][-limit:], limit), True


def _splice(head, tail, limit):
    # "head" is the first bytes of the stream and "tail" the last bytes of the rest
    # of it; "head + tail" therefore always ends with the last bytes of the stream.
    if limit <= len(TRUNCATION_MARKER):
        return bytes(head[:limit])
    head_length = (limit - len(TRUNCATION_MARKER)) // 2
    tail_length = limit - len(TRUNCATION_MARKER) - head_length
    return bytes(head[:head_length]) + TRUNCATION_MARKER + bytes((head + tail)[-tail_length:])


class _OutputCapture:
    """Reads a pipe to its end while keeping only what truncation can use."""

    def __init__(self, stream, limit):
        self.stream = stream
        self.limit = limit
        self.head = bytearray()
        self.tail = bytearray()
        self.total = 0
        self.thread = threading.Thread(target=self._read, daemon=True)
        self.thread.start()

    def _read(self):
        for chunk in iter(lambda: self.stream.read1(_READ_CHUNK), b""):
            self._feed(chunk)

    def _feed(self, chunk):
        self.total += len(chunk)
        room = self.limit - len(self.head)
        if room > 0:
            self.head += chunk[:room]
            chunk = chunk[room:]
        self.tail += chunk
        if len(self.tail) > self.limit:
            del self.tail[: len(self.tail) - self.limit]

    def join(self, timeout=None):
        self.thread.join(timeout)
        return not self.thread.is_alive()

    def result(self):
        if self.total <= self.limit:
            return bytes(self.head), False
        return _splice(self.head, self.tail, self.limit), True


class TerminalExecutor:
    """Runs shell commands for one workspace, one command at a time.

    Subclasses say how a command line becomes a process (``_argv()``); this class
    takes care of timeouts, process-group termination, and output truncation.
    """

    def __init__(self, workdir, shell="/bin/sh", output_limit=OUTPUT_LIMIT):
        self.workdir = str(workdir)
        self.shell = shell
        self.output_limit = output_limit
        self._lock = threading.Lock()
        self._handles = {}
        self._handle_ids = itertools.count(1)

    def command(self, command, mode=SYNC, timeout_ms=30000):
        return TerminalCommand(
            command=command, mode=mode, timeout_ms=timeout_ms, workdir=self.workdir
        )

    def execute(self, cmd):
        with self._lock:
            self._check_workdir(cmd.workdir)
            if cmd.mode == ASYNC:
                return self._start_async(cmd)
            return self._run_sync(cmd)

    def poll(self, handle_id):
        """Return the current state of a command started in async mode."""
        process, output_file, started = self._handles[handle_id]
        exit_code = process.poll()
        # pread leaves the file offset, which the command shares, untouched
        fd = output_file.fileno()
        output, truncated = truncate_output(
            os.pread(fd, os.fstat(fd).st_size, 0), self.output_limit
        )
        duration_ms = int((time.monotonic() - started) * 1000)
        if exit_code is not None:
            output_file.close()
            del self._handles[handle_id]
        return TerminalResult(
            exit_code=exit_code,
            output=output,
            truncated=truncated,
            duration_ms=duration_ms,
            handle_id=handle_id,
        )

    def close(self):
        for process, output_file, started in self._handles.values():
            self._kill_process_group(process)
            process.wait()
            output_file.close()
        self._handles.clear()

    def _check_workdir(self, workdir):
        pass

    def _argv(self, cmd):
        raise NotImplementedError

    def _cwd(self, cmd):
        return None

    def _spawn(self, cmd, stdout):
        try:
            return subprocess.Popen(
                self._argv(cmd),
                cwd=self._cwd(cmd),
                stdin=subprocess.DEVNULL,
                stdout=stdout,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        except OSError as e:
            raise SpawnFailure(
                "Could not start {}: {}".format(self._argv(cmd)[0], e),
                command=cmd.command,
            )

    def _run_sync(self, cmd):
        logger.debug("Running %r in %s", cmd.command[:200], cmd.workdir)
        started = time.monotonic()
        process = self._spawn(cmd, subprocess.PIPE)
        capture = _OutputCapture(process.stdout, self.output_limit)
        timed_out = False
        try:
            exit_code = process.wait(timeout=cmd.timeout_ms / 1000)
        except subprocess.TimeoutExpired:
            self._kill_process_group(process)
            process.wait()
            exit_code, timed_out = TIMEOUT_EXIT_CODE, True
            logger.info("Command timed out after %d ms: %r", cmd.timeout_ms, cmd.command)
        if not capture.join(_STRAGGLER_GRACE_SECONDS):
            self._kill_process_group(process)
            capture.join(_STRAGGLER_GRACE_SECONDS * 5)
        process.stdout.close()
        duration_ms = int((time.monotonic() - started) * 1000)
        output, truncated = capture.result()
        if truncated:
            logger.info("Output of %r truncated from %d bytes", cmd.command, capture.total)
        return TerminalResult(
            exit_code=exit_code,
            output=output,
            truncated=truncated,
            duration_ms=duration_ms,
            timed_out=timed_out,
        )

    def _start_async(self, cmd):
        output_file = tempfile.TemporaryFile()
        process = self._spawn(cmd, output_file)
        handle_id = "term-{}".format(next(self._handle_ids))
        self._handles[handle_id] = (process, output_file, time.monotonic())
        logger.debug("Started %r in the background as %s", cmd.command, handle_id)
        return TerminalResult(
            exit_code=None,
            output="Started in the background with id {}".format(handle_id).encode(),
            handle_id=handle_id,
        )

    @staticmethod
    def _kill_process_group(process):
        try:
            os.killpg(process.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass


class LocalExecutor(TerminalExecutor):
    """Runs commands as local subprocesses inside a workspace directory."""

    def _check_workdir(self, workdir):
        if not os.path.isdir(workdir):
            raise WorkdirMissing(
                '"{}" is not an existing directory'.format(workdir), workdir=str(workdir)
            )

    def _argv(self, cmd):
        return [self.shell, "-c", cmd.command]

    def _cwd(self, cmd):
        return cmd.workdir


class ContainerExecutor(TerminalExecutor):
    """Runs commands inside a named, already running container.

    A timeout kills the local ``exec`` client; the container runtime then tears
    down the command's session.
    """

    def __init__(self, workdir, container, runtime="docker", **kwargs):
        super().__init__(workdir, **kwargs)
        self.container = container
        self.runtime = runtime

    def _argv(self, cmd):
        return [
            self.runtime,
            "exec",
            "--workdir",
            cmd.workdir,
            self.container,
            self.shell,
            "-c",
            cmd.command,
        ]


def make_executor(sandbox, workdir):
    """Create the executor that the ``sandbox`` settings ask for."""
    if sandbox.backend == "container":
        return ContainerExecutor(
            workdir,
            container=sandbox.container,
            runtime=sandbox.container_runtime,
            shell=sandbox.shell,
            output_limit=sandbox.output_limit,
        )
    return LocalExecutor(workdir, shell=sandbox.shell, output_limit=sandbox.output_limit)
