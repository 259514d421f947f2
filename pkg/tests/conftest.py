import numpy as np
import pytest

from lateinteract.numerics import TokenMatrix, make_rng


def random_item(rng, n, d, modality="video", item_id=0, pad=0):
    """Random item with ``n`` valid rows followed by ``pad`` masked garbage rows."""
    tokens = rng.standard_normal((n + pad, d))
    mask = np.zeros(n + pad, dtype=bool)
    mask[:n] = True
    return TokenMatrix(item_id, tokens, mask, modality)


def random_batch(rng, b, d, modality, max_n=6, pad_max=0):
    out = []
    for i in range(b):
        n = int(rng.integers(1, max_n + 1))
        pad = int(rng.integers(0, pad_max + 1)) if pad_max else 0
        out.append(random_item(rng, n, d, modality, i, pad))
    return out


@pytest.fixture
def rng():
    return make_rng(1234)


def run_cli(*args, cwd=None, env_extra=None):
    """Run the CLI in a fresh interpreter; returns (exit code, stdout, stderr)."""
    import os
    import subprocess
    import sys

    env = dict(os.environ, **(env_extra or {}))
    p = subprocess.run([sys.executable, "-m", "lateinteract.cli", *map(str, args)],
                       cwd=cwd, env=env, capture_output=True, text=True)
    return p.returncode, p.stdout, p.stderr


def parse_records(text):
    return [dict(f.split(":", 1) for f in line.split("\t")) for line in text.splitlines() if line]


ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    """Store one criterion outcome; printed again in the terminal summary."""
    line = f"ACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
