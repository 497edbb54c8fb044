import importlib.util
from pathlib import Path

from airglyph import dtw


def _bench():
    path = Path(__file__).parent.parent / "benchmarks" / "bench_dtw.py"
    spec = importlib.util.spec_from_file_location("bench_dtw", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_benchmark_runs_and_backends_agree(capsys):
    bench = _bench()
    rows = bench.run(refs=4, length=16, repeat=1, band=3)
    assert rows["numpy"] > 0
    if dtw.BACKEND == "compiled":
        assert rows["max_abs_diff"] <= 1e-12
    bench.main(["--refs", "3", "--length", "12", "--repeat", "1"])
    assert "numpy" in capsys.readouterr().out
