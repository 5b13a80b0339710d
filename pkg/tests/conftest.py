import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def dataset(tmp_path):
    """Three small synthetic pairs; returns (root, pair entries)."""
    from gadclean.synthetic import write_change_dataset

    root = tmp_path / "data"
    return root, write_change_dataset(root, n_pairs=3, seed=7, size=40, n_blobs=(1, 2), radius=(4.0, 6.0))


@pytest.fixture
def make_config(tmp_path, dataset):
    """Build a HyperepochConfig over ``dataset``; keyword overrides go into the document."""
    from gadclean.pipeline import HyperepochConfig

    root, entries = dataset

    def build(**overrides):
        doc = {
            "schema_version": 1,
            "dataset_root": str(root),
            "pairs": entries,
            "output_root": str(tmp_path / overrides.pop("out", "out")),
            "hyperepochs": 3,
            "gad": {"iterations": 20},
        }
        doc.update(overrides)
        return HyperepochConfig.from_dict(doc)

    return build



_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title} ({detail})"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
