import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kdctc.experiment import generate_synthetic_texture_dataset  # noqa: E402


def make_class_dirs(root: Path, counts: dict, size=(20, 20)):
    from PIL import Image
    import numpy as np

    rng = np.random.default_rng(0)
    for name, n in counts.items():
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            px = rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)
            Image.fromarray(px).save(d / f"{i:04d}.png")
    return root


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """4 classes x 30 images of 150x150 textures."""
    return generate_synthetic_texture_dataset(4, 30, 150, 0, tmp_path_factory.mktemp("synth"))


@pytest.fixture(scope="session")
def kather16_like_root(tmp_path_factory):
    """8 classes x 625 small PNGs: the Kather-2016 class layout."""
    import io

    import numpy as np
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.full((12, 12, 3), 128, np.uint8)).save(buf, format="PNG")
    data = buf.getvalue()
    root = tmp_path_factory.mktemp("k16")
    for c in range(8):
        d = root / f"tissue_{c}"
        d.mkdir()
        for i in range(625):
            (d / f"{i:04d}.png").write_bytes(data)
    return root


_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if "criterion_" in report.nodeid:
            name = report.nodeid.split("::")[-1]
            _ACCEPTANCE[name] = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        terminalreporter.write_line(f"{_ACCEPTANCE[name]:4s}  {name}")
