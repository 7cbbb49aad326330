import numpy as np
import pytest
from PIL import Image

from uwsplat import raster

raster.set_threads(1)


def write_colmap_fixture(d, n_images=8, n_points=10, model="PINHOLE", points=True):
    """Hand-written COLMAP text model with tiny images."""
    d.mkdir(parents=True, exist_ok=True)
    (d / "images").mkdir(exist_ok=True)
    params = "20 20 8 6" if model == "PINHOLE" else "20 8 6"
    if model not in ("PINHOLE", "SIMPLE_PINHOLE"):
        params = "20 8 6 0.1"
    (d / "cameras.txt").write_text(f"# cameras\n1 {model} 16 12 {params}\n")
    lines = ["# images"]
    rng = np.random.default_rng(3)
    for i in range(n_images):
        name = f"img_{i:02d}.png"
        lines.append(f"{i + 1} 1 0 0 0 {0.1 * i} 0 0 1 {name}")
        lines.append("1.0 2.0 -1")
        Image.fromarray(rng.integers(0, 255, (12, 16, 3), dtype=np.uint8)).save(d / "images" / name)
    (d / "images.txt").write_text("\n".join(lines) + "\n")
    pts = ["# points"]
    if points:
        for i in range(n_points):
            pts.append(f"{i + 1} {0.1 * i} {-0.2 * i} {4 + 0.05 * i} 10 200 30 0.5 1 1")
    (d / "points3D.txt").write_text("\n".join(pts) + "\n")
    return d


@pytest.fixture
def colmap_dir(tmp_path):
    return write_colmap_fixture(tmp_path / "scene")


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
