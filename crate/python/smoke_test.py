"""End-to-end check of the Python bindings on a small synthetic sequence."""

import json
import sys
import tempfile
from pathlib import Path

import serialreg


def main() -> int:
    assert serialreg.bspline_weights(0.0) == [1 / 6, 2 / 3, 1 / 6, 0.0]
    assert abs(serialreg.rtre((3.0, 4.0), (0.0, 0.0), (300, 400)) - 0.01) < 1e-12
    keys = dict(serialreg.config_keys())
    assert "bspline-lambda" in keys
    assert serialreg.default_config()["spacing"] == "1,1,8"

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        slices = serialreg.synth(str(tmp / "data"), seed=3, num_slices=3, width=128, height=128)
        w, h, pixels = serialreg.load_image(slices[0])
        assert (w, h) == (128, 128) and len(pixels) == w * h

        pair = serialreg.register_pair(slices[0], slices[1], {"bspline": "false"})
        assert pair["status"] == "affine-only", pair

        placed, breaks = serialreg.register_sequence(slices, str(tmp / "run"))
        assert all(placed) and not breaks, (placed, breaks)
        report = json.loads(serialreg.evaluate_run(str(tmp / "run"), str(tmp / "data" / "landmarks")))
        print(f"R_avg {report['r_avg']:.3f}  AMean_D {report['amean_d_px']:.3f} px")
        assert report["r_avg"] >= 0.9

        try:
            serialreg.register_pair(slices[0], slices[1], {"match-ratio": "2"})
        except ValueError:
            pass
        else:
            raise AssertionError("invalid config accepted")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
