"""Bridge to predictors running as child processes over a line protocol.

Protocol (UTF-8, line oriented):

* child announces itself with ``HELLO <W> <F>``
* parent sends ``PREDICT <n>`` followed by n comma-separated rows of W*F
  decimal values
* child replies with n lines, each a single decimal probability
* ``QUIT`` ends the session

Any deviation raises :class:`~xpbench.errors.ProtocolError` instead of
leaking a wrong probability into an explanation.
"""

import logging
import shlex
import subprocess
import threading

import numpy as np

from .errors import ProtocolError
from .predictor import PredictorHandle

log = logging.getLogger(__name__)


class ExternalPredictor(PredictorHandle):
    """PredictorHandle backed by a subprocess speaking the stdio protocol.

    Requests are serialized through one pipe with an internal lock, so the
    handle may be shared between threads.
    """

    def __init__(self, command, working_dir=None):
        self._proc = subprocess.Popen(
            shlex.split(command),
            cwd=working_dir,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._lock = threading.Lock()
        self._closed = False
        hello = self._readline()
        parts = hello.split()
        if len(parts) != 3 or parts[0] != "HELLO":
            self._abort()
            raise ProtocolError(f"expected HELLO <W> <F>, got {hello!r}")
        try:
            week_count, feature_count = int(parts[1]), int(parts[2])
        except ValueError:
            self._abort()
            raise ProtocolError(f"non-integer dimensions in {hello!r}") from None
        super().__init__(self._request, name=f"external({command})",
                         week_count=week_count, feature_count=feature_count,
                         kind="external")

    def _readline(self):
        line = self._proc.stdout.readline()
        if line == "":
            code = self._proc.poll()
            raise ProtocolError(
                f"predictor process ended unexpectedly (exit code {code})"
            )
        return line.rstrip("\n")

    def _request(self, X):
        with self._lock:
            if self._closed:
                raise ProtocolError("predictor already closed")
            n = X.shape[0]
            payload = [f"PREDICT {n}"]
            payload.extend(",".join(repr(float(v)) for v in row) for row in X)
            try:
                self._proc.stdin.write("\n".join(payload) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ProtocolError(f"predictor pipe broke: {exc}") from None
            out = np.empty(n)
            for i in range(n):
                line = self._readline()
                try:
                    p = float(line)
                except ValueError:
                    raise ProtocolError(
                        f"malformed response line {i + 1}: {line!r}"
                    ) from None
                if not 0.0 <= p <= 1.0:
                    raise ProtocolError(
                        f"response line {i + 1}: probability {p} outside [0, 1]"
                    )
                out[i] = p
            return out

    def _abort(self):
        try:
            self._proc.kill()
        except OSError:
            pass

    def close(self):
        """Send QUIT and wait for the child to exit."""
        with self._lock:
            if self._closed:
                return
            self._closed = True
        try:
            self._proc.stdin.write("QUIT\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._abort()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def external_predictor(command, working_dir=None):
    """Launch ``command`` and wrap it as a PredictorHandle."""
    return ExternalPredictor(command, working_dir=working_dir)
