import sys
import threading

import numpy as np
import pytest

from xpbench.errors import ProtocolError
from xpbench.external import external_predictor

CHILD_TEMPLATE = '''
import sys

print("HELLO {w} {f}", flush=True)
while True:
    line = sys.stdin.readline()
    if not line or line.strip() == "QUIT":
        break
    n = int(line.split()[1])
    rows = [sys.stdin.readline() for _ in range(n)]
    for row in rows:
{body}
'''


def make_child(tmp_path, name, body, w=1, f=3):
    script = tmp_path / f"{name}.py"
    indented = "\n".join("        " + line for line in body.splitlines())
    script.write_text(CHILD_TEMPLATE.format(w=w, f=f, body=indented))
    return f"{sys.executable} {script}"


def test_constant_child(tmp_path):
    cmd = make_child(tmp_path, "half", 'print("0.5", flush=True)')
    with external_predictor(cmd) as handle:
        assert handle.week_count == 1 and handle.feature_count == 3
        out = handle.predict(np.random.default_rng(0).uniform(0, 1, (5, 3)))
        assert np.array_equal(out, np.full(5, 0.5))


def test_identity_on_first_feature(tmp_path):
    cmd = make_child(tmp_path, "first",
                     'print(row.split(",")[0], flush=True)')
    with external_predictor(cmd) as handle:
        out = handle.predict(np.array([[0.3, 0.1, 0.9], [0.7, 0.0, 0.0]]))
        assert out == pytest.approx([0.3, 0.7])


def test_malformed_response_names_line(tmp_path):
    cmd = make_child(tmp_path, "bad", 'print("abc", flush=True)')
    with external_predictor(cmd) as handle:
        with pytest.raises(ProtocolError, match="line 1"):
            handle.predict(np.zeros((2, 3)))


def test_out_of_range_probability(tmp_path):
    cmd = make_child(tmp_path, "range", 'print("1.5", flush=True)')
    with external_predictor(cmd) as handle:
        with pytest.raises(ProtocolError, match=r"outside \[0, 1\]"):
            handle.predict(np.zeros((1, 3)))


def test_short_reply_surfaces_process_exit(tmp_path):
    script = tmp_path / "short.py"
    script.write_text(
        "import sys\n"
        'print("HELLO 1 3", flush=True)\n'
        "line = sys.stdin.readline()\n"
        'print("0.5", flush=True)\n'  # one line, then exit mid-batch
    )
    with external_predictor(f"{sys.executable} {script}") as handle:
        with pytest.raises(ProtocolError, match="ended unexpectedly"):
            handle.predict(np.zeros((3, 3)))


def test_bad_handshake(tmp_path):
    script = tmp_path / "nohello.py"
    script.write_text('print("HOWDY", flush=True)\n')
    with pytest.raises(ProtocolError, match="HELLO"):
        external_predictor(f"{sys.executable} {script}")


def test_concurrent_callers_serialized(tmp_path):
    cmd = make_child(tmp_path, "echo1", 'print(row.split(",")[0], flush=True)')
    with external_predictor(cmd) as handle:
        results = {}

        def worker(tag, value):
            X = np.full((8, 3), value)
            results[tag] = handle.predict(X)

        threads = [threading.Thread(target=worker, args=(i, i / 10))
                   for i in range(1, 5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(1, 5):
            assert results[i] == pytest.approx(np.full(8, i / 10))
