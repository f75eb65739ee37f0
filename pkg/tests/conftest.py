import numpy as np
import pytest

from semflow.labels import SemanticClass
from semflow.synthscenes import ScenarioSpec, SmoothTexture, generate_clip


def texture(seed: int, size: int = 64, freq=(0.04, 0.2)) -> np.ndarray:
    tex = SmoothTexture(np.random.default_rng(seed), freq=freq)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return tex(xs, ys)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ped_clip():
    spec = ScenarioSpec(
        agent_class=SemanticClass.PEDESTRIAN, agent_size=22.0, agent_speed=2.0,
        closing_distance=3.0, closing_speed=10.0, ego_flow=(0.6, 0.3),
        n_frames=20, n_distractors=2, texture_seed=7,
    )
    return generate_clip(spec, seed=3)


@pytest.fixture(scope="session")
def mixed_clips():
    """One clip per agent class plus a background clip."""
    out = []
    for i, cls in enumerate((SemanticClass.BICYCLE, SemanticClass.PEDESTRIAN, SemanticClass.VEHICLE, None)):
        spec = ScenarioSpec(
            agent_class=cls, agent_size=22.0, agent_speed=1.8, agent_heading=0.3 * i,
            closing_distance=3.0, closing_speed=10.0, ego_flow=(0.5, -0.2),
            n_frames=18, n_distractors=3, texture_seed=20 + i,
        )
        out.append(generate_clip(spec, seed=40 + i))
    return out


ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str = "") -> None:
    """Log one acceptance outcome for the end-of-run summary, then assert it."""
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    assert ok, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
