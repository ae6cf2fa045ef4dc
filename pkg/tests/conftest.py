"""Shared pytest wiring: a one-line-per-criterion summary for the acceptance suite."""

from contextlib import contextmanager

import pytest

CRITERIA = {
    1: "grid cardinality (37 per demo)",
    2: "verification threshold (tau = 0.015 m)",
    3: "simulation equivariance (50 specs, 1e-6 m, < 60 s)",
    4: "render-transform equivariance (100 T, 1e-5)",
    5: "gradient check (100 trials, rel. err < 1e-3)",
    6: "fit convergence (PSNR >= 30 dB, depth MAE < 2 %, < 600 s)",
    7: "dynamics sanity (free fall, resting, energy)",
    8: "determinism (replay/augment hashes across runs and --jobs)",
    9: "meshing (sphere < 1.5 voxels, RANSAC < 1 deg)",
    10: "replay self-consistency (< 1e-9 m)",
}

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """``with criterion(n) as note:`` records PASS/FAIL for acceptance criterion ``n``.

    ``note`` is a dict; anything stored under ``"detail"`` is printed with the verdict.
    """
    results = request.config.stash[_RESULTS]

    @contextmanager
    def run(number):
        note = {"detail": ""}
        try:
            yield note
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            results[number] = ("FAIL", f"{note['detail']} -- {reason}".strip(" -"))
            raise
        results[number] = ("PASS", note["detail"])

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        verdict, detail = results.get(number, ("NOT RUN", ""))
        line = f"{verdict:<7} {number:>2}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
