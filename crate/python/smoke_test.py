"""Smoke test for the `msvit` Python module.

Run from the repository root:

    cargo build -p msvit-py
    python3 python/smoke_test.py

The script copies target/<profile>/libmsvit.so to a temporary directory as
msvit.so and imports it from there. Set MSVIT_LIB to use a different file.
"""

import importlib
import math
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def locate_library():
    if "MSVIT_LIB" in os.environ:
        return pathlib.Path(os.environ["MSVIT_LIB"])
    for profile in ("debug", "release"):
        p = ROOT / "target" / profile / "libmsvit.so"
        if p.exists():
            return p
    sys.exit("libmsvit.so not found; run `cargo build -p msvit-py` first")


def import_msvit(tmp):
    shutil.copy(locate_library(), pathlib.Path(tmp) / "msvit.so")
    sys.path.insert(0, tmp)
    return importlib.import_module("msvit")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        msvit = import_msvit(tmp)

        assert "tiny" in msvit.profile_names()

        # Constant drive 1.0 with tau 2 charges 0.5, 0.75, 0.875: no spike.
        assert msvit.lif([1.0, 1.0, 1.0], [3, 1, 1, 1]) == [0, 0, 0]
        assert msvit.lif([2.0, 0.0, 2.0], [3, 1, 1, 1]) == [1, 0, 1]

        # One token, one channel: the gate fires once the summed branch
        # activity charges the neuron to threshold.
        out = msvit.mssa_gate([[1, 1], [1, 1]], [1, 1], [2, 1, 1, 1])
        assert out == [1, 1], out

        report = msvit.energy(
            [
                {"flops": 144, "timesteps": 1, "charge": "mac"},
                {"flops": 8, "timesteps": 1, "charge": "ac", "firing_rate": 0.5},
            ]
        )
        assert math.isclose(report["total_pj"], 666.0, rel_tol=1e-12), report

        cfg = msvit.ModelConfig.profile("tiny")
        assert msvit.ModelConfig.from_toml(cfg.to_toml()).to_toml() == cfg.to_toml()
        tokens = [s[3] for s in cfg.stages()]
        assert tokens[0] == 4 * tokens[1] == 16 * tokens[2], tokens

        model = msvit.Model(cfg)
        assert model.param_count > 0
        assert model.hash() == msvit.Model(cfg).hash()

        events, width, height = msvit.synth_stream(0, 3)
        t = cfg.timesteps
        c, h, w = cfg.input_shape
        frames = msvit.frames(events, width, height, t, h, w)
        assert len(frames) == t * c * h * w
        assert set(frames) <= {0.0, 1.0}

        logits = model.logits(frames, [t, 1, c, h, w])
        assert len(logits) == cfg.num_classes
        assert all(math.isfinite(v) for v in logits)

        path = pathlib.Path(tmp) / "model.ckpt"
        model.save(str(path))
        assert msvit.Model.load(str(path)).hash() == model.hash()

        try:
            msvit.ModelConfig.profile("no-such-model")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown profile accepted")

    print("msvit python smoke test passed")


if __name__ == "__main__":
    main()
