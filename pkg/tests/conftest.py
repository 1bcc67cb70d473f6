import numpy as np
import pytest
import torch

from metatra.data import AgentTrack, SynthDomainSpec, make_batches, relativize, synth_generate, window_scene
from metatra.dual_tt import ModelConfig
from metatra.model import BatchTensors


def line_track(agent_id, start, velocity, n_frames, first_frame=0, agent_type="pedestrian"):
    frames = np.arange(first_frame, first_frame + n_frames, dtype=float)
    xy = np.asarray(start, float) + np.outer(frames - first_frame, velocity)
    return AgentTrack(agent_id, np.column_stack([frames, xy]), agent_type)


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=8, n_heads_temporal=2, n_heads_relation=2, d_latent=4)


@pytest.fixture
def small_windows():
    spec = SynthDomainSpec("s", agents_per_scene=(2, 4))
    scenes = synth_generate(spec, 3, 14, seed=1)
    return [relativize(w)[0] for s in scenes for w in window_scene(s, 4, 10, 2)]


@pytest.fixture
def small_batch(small_windows):
    return BatchTensors.from_batch(make_batches(small_windows, 12, 0)[0], torch.float64)


# ---------------------------------------------------- acceptance reporting

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    entry = _criteria.setdefault(mark.args[0], {"passed": True, "tests": [], "notes": []})
    if report.failed or report.skipped:
        entry["passed"] = False
    if report.when == "call":
        entry["tests"].append(item.name)
        entry["notes"].extend(line for line in report.capstdout.splitlines() if line.strip())


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({', '.join(entry['tests'])})")
        for note in entry["notes"]:
            terminalreporter.write_line(f"    {note}")
