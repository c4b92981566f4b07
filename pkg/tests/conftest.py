import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import desk_runs  # noqa: E402

CRITERIA = {
    1: "CTC oracle equivalence",
    2: "gradient suite",
    3: "streaming equals offline",
    4: "FSQ bijection and bounds",
    5: "interleaving",
    6: "end-to-end desk training",
    7: "ablation orderings",
    8: "longform windows and latency",
    9: "metric oracles",
}
_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the verdict printed in the summary."""

    def record(n: int, ok: bool, detail: str = ""):
        _results[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _results:
            ok, detail = _results[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {name}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN {name}")


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Corpora and the three trained seeds (built on first use, reused when cached)."""
    env = os.environ.get("STREAMTOK_DESK_RUNS")
    root = Path(env) if env else tmp_path_factory.mktemp("desk")
    root.mkdir(parents=True, exist_ok=True)
    noisy, clean = desk_runs.build_corpora(root)
    runs = [desk_runs.build_run(root, noisy, s) for s in desk_runs.SEEDS]
    return {"noisy": noisy, "clean": clean, "runs": runs}
