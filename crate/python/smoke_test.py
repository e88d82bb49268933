"""Quick check of the installed Python bindings.

    pip install maturin
    (cd crates/py && maturin build --release --out dist && pip install dist/*.whl)
    python python/smoke_test.py
"""

import tempfile
from pathlib import Path

import numpy as np

import lesion_cascade as lc


def main():
    unet = lc.param_count("unet")
    tiramisu = lc.param_count("tiramisu")
    assert 7_500_000 <= unet <= 8_000_000, unet
    assert 1_440_000 <= tiramisu <= 2_160_000, tiramisu
    assert "total" in lc.describe("tiramisu")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        case = lc.phantom(0, size=(24, 20, 16), seed=3, out_dir=tmp)
        assert case["image"].shape == (24, 20, 16)
        assert case["liver"].sum() > 0
        assert np.all(case["lesion"] <= case["liver"])

        hu, spacing = lc.load_volume(tmp / "case_000_image.vol")
        np.testing.assert_array_equal(hu, case["image"])
        liver, _ = lc.load_mask(tmp / "case_000_liver.vol")
        np.testing.assert_array_equal(liver, case["liver"])

        m = lc.evaluate(liver, case["liver"], spacing)
        assert m["dice"] == 1.0 and m["assd"] == 0.0, m

        shifted = np.roll(liver, 1, axis=0)
        lc.save_mask(tmp / "shifted.vol", shifted, spacing)
        back, _ = lc.load_mask(tmp / "shifted.vol")
        np.testing.assert_array_equal(back, shifted)
        m = lc.evaluate(back, liver, spacing)
        assert 0.0 < m["dice"] < 1.0, m

        empty = lc.evaluate(np.zeros_like(liver), liver, spacing)
        assert empty["dice"] == 0.0 and empty["assd"] is None, empty

        try:
            lc.load_volume(tmp / "missing.vol")
        except OSError:
            pass
        else:
            raise AssertionError("missing file did not raise")

    print(f"ok: unet {unet} params, tiramisu {tiramisu} params")


if __name__ == "__main__":
    main()
