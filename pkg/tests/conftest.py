import numpy as np
import pytest

from kickdir.classifier import Batch
from kickdir.dataset import ClipRecord, Direction, Side


def make_record(clip_id, label=Direction.LEFT, side=Side.LEFT, foot=Side.LEFT, dive=None, kick=40):
    return ClipRecord(clip_id, f"frames/{clip_id}", f"boxes/{clip_id}.csv", kick, side, foot, label, dive)


def full_scale_records():
    """640 records matching the published label, side and foot marginals."""
    labels = [Direction.LEFT] * 229 + [Direction.RIGHT] * 303 + [Direction.CENTER] * 108
    sides = [Side.RIGHT] * 395 + [Side.LEFT] * 245
    feet = [Side.RIGHT] * 498 + [Side.LEFT] * 142
    rng = np.random.default_rng(7)
    sides = [sides[i] for i in rng.permutation(640)]
    feet = [feet[i] for i in rng.permutation(640)]
    return [make_record(f"pk{i:03d}", labels[i], sides[i], feet[i]) for i in range(640)]


def random_batch(rng, m, dim, n):
    return Batch(
        t_run=rng.normal(size=(m, dim)),
        t_kick=rng.normal(size=(m, dim)),
        gamma=rng.integers(0, 2, size=(m, 2)).astype(float),
        labels=rng.integers(0, n, size=m),
    )


@pytest.fixture
def full_records():
    return full_scale_records()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the terminal summary."""
    def record(number: int, title: str, ok: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}" + (f"  ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(".")[0].split()[-1])):
            terminalreporter.write_line(line)
