from dataclasses import dataclass
from pathlib import Path

import pytest

from personinsert.cli import main


@dataclass
class CliWorld:
    root: Path
    data: Path
    coarse: Path
    kb: Path
    renderers: dict  # attention mode -> checkpoint
    scene_id: str
    exemplar_id: str

    def generate_args(self, out, *extra):
        return ["generate", "--coarse", str(self.coarse), "--kb", str(self.kb),
                "--renderer", str(self.renderers["full"]), "--data", str(self.data),
                "--scene-id", self.scene_id, "--exemplar-id", self.exemplar_id, "--out", str(out), *extra]


def run(*argv):
    return main([str(a) for a in argv])


# -- acceptance reporting ---------------------------------------------------------------

_ACCEPTANCE = {}


class Criterion:
    """Collects sub-checks for one acceptance criterion and prints a single PASS/FAIL line."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.checks = number, title, []

    def check(self, ok, detail: str):
        self.checks.append((bool(ok), detail))

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None and bool(self.checks) and all(o for o, _ in self.checks)
        parts = [f"{d} [{'ok' if o else 'FAILED'}]" for o, d in self.checks]
        if exc_type is not None:
            parts.append(f"raised {exc_type.__name__}: {exc}")
        line = f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}  {self.title}: " + "; ".join(parts)
        print(line)
        _ACCEPTANCE[self.number] = line
        if exc_type is None and not ok:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture(scope="session")
def cli_world(tmp_path_factory):
    """Desk-scale artifacts produced through the command line itself."""
    root = tmp_path_factory.mktemp("cli")
    data, m = root / "data", root / "models"
    # 40 identities give 80 fashion maps: the clustering ablation needs at least K=64
    assert run("prepare-data", "--layout", "synthetic", "--out", data, "--n-scenes", 40, "--n-identities", 40) == 0
    assert run("train-coarse", "--data", data, "--out", m / "coarse.pt", "--canvas-side", 64,
               "--generator-scale", 0.125, "--steps", 300, "--batch-size", 8) == 0
    assert run("build-kb", "--data", data, "--out", m / "kb", "--scheme", "pixel-704", "--K", 4) == 0
    renderers = {}
    for mode in ("baseline", "hr_only", "lr_only", "full"):
        renderers[mode] = m / f"renderer_{mode}.pt"
        assert run("train-renderer", "--data", data, "--out", renderers[mode], "--attention-mode", mode,
                   "--width-scale", 1 / 64, "--image-size", 32, "--steps", 3) == 0
    world = CliWorld(root, data, m / "coarse.pt", m / "kb", renderers, "", "id00000_0")
    # a briefly trained coarse model places nobody in some scenes; use the first where it places someone
    for i in range(40):
        world.scene_id = f"scene{i:05d}"
        if run(*world.generate_args(root / "probe")) == 0:
            return world
    pytest.fail("the coarse model placed no person in any prepared scene")
