"""Real-data reproduction gate.

Needs an MVTecAD checkout (MVTEC_ROOT env var) and downloadable pretrained
backbone weights, so it is skipped in offline environments. With real data:
at 10% overlap noise on the 'bottle' class, the denoised LOF pipeline must
average image AUROC >= 0.95 while the no-denoise baseline stays <= 0.85.
"""

import os
from pathlib import Path

import numpy as np
import pytest

MVTEC_ROOT = os.environ.get("MVTEC_ROOT")

pytestmark = pytest.mark.skipif(
    MVTEC_ROOT is None,
    reason="set MVTEC_ROOT to an MVTecAD checkout to run the real-data gate",
)


@pytest.mark.parametrize("class_name", ["bottle"])
def test_real_data_reproduction(tmp_path, class_name):
    softpatch = pytest.importorskip("softpatch")
    from softpatch.evaluation import EvalDataset, method_preset, run_cell

    from softpatch_extractor.config import ExtractorConfig
    from softpatch_extractor.extract import extract

    class_dir = Path(MVTEC_ROOT) / class_name
    out = tmp_path / class_name
    extract(class_dir, out, ExtractorConfig(pretrained=True))

    data = EvalDataset.from_files(out / "train.json", out / "test.json")
    seeds = (0, 1, 2)
    lof = np.mean([
        run_cell(data, method_preset("softpatch-lof"), 0.10, s, mode="overlap").image_auroc
        for s in seeds
    ])
    base = np.mean([
        run_cell(data, method_preset("baseline"), 0.10, s, mode="overlap").image_auroc
        for s in seeds
    ])
    print(f"{class_name}: softpatch-lof {lof:.3f}, baseline {base:.3f}")
    assert lof >= 0.95
    assert base <= 0.85
