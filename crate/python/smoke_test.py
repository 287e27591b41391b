"""End-to-end check of the Python bindings on a tiny synthetic dataset.

Build the module first, e.g. `maturin develop -m crates/py/Cargo.toml`, or copy
target/release/libattrassist_py.so to attrassist.so somewhere on PYTHONPATH.
"""

import json
import math
import tempfile
from pathlib import Path

import attrassist


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        spec = attrassist.SyntheticSpec(
            num_classes=4,
            classes_per_attribute_group=2,
            canvas=24,
            fine_detail_scale=2,
            position_jitter=2,
            train_per_class=6,
            val_per_class=2,
            test_per_class=3,
            seed=3,
        )
        manifest = spec.generate(tmp / "data")
        assert Path(manifest).exists()

        cfg = attrassist.TrainConfig(
            epochs=2,
            lr_step=1,
            batch_size=8,
            resolution=8,
            channels=[4, 8],
            blocks_per_stage=[1, 1],
            feature_dim=6,
        )
        assert cfg.batch_size == 8
        assert cfg.replace(**{"lambda": 0.1}).to_dict()["lambda"] == 0.1

        run = attrassist.train(cfg, manifest, tmp / "run")
        assert len(run.history) == 2
        assert all(math.isfinite(h["total"]) for h in run.history)
        assert len(run.centers) == 2

        report = run.evaluate(manifest)
        assert report["n_test"] == 12
        assert 0.0 <= report["top_k"]["1"] <= 100.0
        euc = run.evaluate(manifest, mode="euclidean-centroid")
        assert euc["n_test"] == 12

        loaded = attrassist.Run.load(tmp / "run" / "model.atrl")
        assert json.dumps(loaded.evaluate(manifest)) == json.dumps(report)

        longer = loaded.resume(manifest, 3)
        assert len(longer.history) == 3

        var = run.export_features(manifest, tmp / "feats")
        assert var[0] >= var[1] >= 0.0

        feats, logits = run.infer([[0.0] * (3 * 8 * 8)])
        assert len(feats[0]) == 6 and len(logits[0]) == 4

        flat = [0.25] * (5 * 7 * 3)
        out = attrassist.bicubic_resize(flat, 5, 7, 3, (11, 4))
        assert len(out) == 11 * 4 * 3
        assert max(abs(v - 0.25) for v in out) < 1e-12

        assert attrassist.top_k_accuracy([[0.1, 0.9], [0.8, 0.2]], [1, 1], 1) == 50.0
        assert attrassist.cohesion_ratio([[0.0], [0.1], [5.0], [5.1]], [0, 0, 1, 1]) < 0.1
        assert math.isclose(attrassist.lr_at(20, 0.01, 20), 0.001, rel_tol=1e-12)

        try:
            attrassist.TrainConfig(epochs=0)
        except ValueError:
            pass
        else:
            raise AssertionError("epochs=0 accepted")
        try:
            attrassist.Run.load(tmp / "missing.atrl")
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
