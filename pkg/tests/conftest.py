import pytest

from cafnet.data.datasets import build_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three devices, six 128x128 images each: 72 patches, 4/1/1 images per split."""
    root = tmp_path_factory.mktemp("tiny")
    manifest = build_synthetic_dataset(root, n_devices=3, images_per_device=6, seed=0)
    return root / "manifest.csv", manifest


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
