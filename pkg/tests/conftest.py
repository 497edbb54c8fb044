import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from airglyph import cli
from airglyph.core import Dataset, Recording, WritingMode, load_dataset
from airglyph.metricmap import MapperBundle
from airglyph.synth import GenSpec, synth_dataset


def make_recording(rec_id="r0", letter="A", mode="2D", subject="S1", n=20, seed=0, rate_hz=100.0):
    rng = np.random.default_rng(seed)
    return Recording(rec_id, subject, mode, letter, rate_hz, rng.normal(size=(n, 3)))


def lcg_window(T, seed):
    """Deterministic (T, 3) window of exact binary fractions in [-4, 4]."""
    x = seed
    vals = []
    for _ in range(T * 3):
        x = (1103515245 * x + 12345) % 2 ** 31
        vals.append((x % 8193 - 4096) / 1024)
    return np.array(vals).reshape(T, 3)


@pytest.fixture(scope="session")
def small_dataset():
    """Both subjects, both modes, 2 reps: 208 recordings."""
    return synth_dataset(GenSpec(reps_per_letter=2, seed=3))


@pytest.fixture(scope="session")
def default_dataset():
    return synth_dataset(GenSpec())


@dataclass
class Trained:
    root: Path
    dataset_path: Path
    bundle_path: Path
    dataset: Dataset
    bundle: MapperBundle
    train_seconds: float

    @property
    def train(self) -> Dataset:
        return self.dataset.filter(subject="S1")

    @property
    def test(self) -> Dataset:
        return self.dataset.filter(subject="S2")

    def test_mode(self, mode) -> Dataset:
        return self.test.filter(mode=WritingMode.parse(mode))


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Default ``gen-data`` then default ``train-mapper``, run through the CLI."""
    root = tmp_path_factory.mktemp("trained")
    ds_path, bundle_path = root / "data.jsonl", root / "mapper.json"
    assert cli.main(["gen-data", "--out", str(ds_path)]) == 0
    t0 = time.perf_counter()
    assert cli.main(["train-mapper", "--dataset", str(ds_path), "--out", str(bundle_path)]) == 0
    seconds = time.perf_counter() - t0
    return Trained(root, ds_path, bundle_path, load_dataset(ds_path), MapperBundle.load(bundle_path), seconds)


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str):
    CRITERIA[number] = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
