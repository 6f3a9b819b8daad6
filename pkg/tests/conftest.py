from pathlib import Path

import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]

TINY_RUN = """\
seed = 5
out = "{out}"

[data.synth]
n_per_class = 4
class_count = 3
size = 16

[split]
counts = [6, 3, 3]

[model]
input_size = [16, 16]
head = [8, {classes}]
class_count = {classes}

[model.backbone_a]
blocks = [[1, 4], [1, 6]]

[model.backbone_b]
stem_channels = 4
widths = [2, 2, 3, 1, 2, 2]

[train]
batch_size = 3
epochs = {epochs}

[augment]
max_rotation_deg = 5.0
"""


@pytest.fixture
def write_config(tmp_path):
    """Write a tiny synthetic-data run config and return its path."""

    def write(epochs=1, classes=3, name="run.toml"):
        path = tmp_path / name
        out = (tmp_path / "run").as_posix()
        path.write_text(TINY_RUN.format(out=out, epochs=epochs, classes=classes))
        return path

    return write
