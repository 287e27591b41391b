use std::ffi::CString;

use pyo3::prelude::*;

use attrassist_py::attrassist_module;

fn run_script(code: &str) {
    pyo3::append_to_inittab!(attrassist_module);
    Python::initialize();
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, None) {
            e.display(py);
            panic!("python script failed: {e}");
        }
    });
}

// One interpreter per process, so every check lives in a single script.
#[test]
fn module_round_trip() {
    run_script(
        r#"
import math, tempfile
from pathlib import Path
import attrassist as aa

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    spec = aa.SyntheticSpec(num_classes=4, classes_per_attribute_group=2, canvas=24,
                            fine_detail_scale=2, position_jitter=2, train_per_class=4,
                            val_per_class=1, test_per_class=2, seed=1)
    assert aa.SyntheticSpec.from_toml(spec.to_toml()).to_toml() == spec.to_toml()
    manifest = spec.generate(tmp / "data")

    cfg = aa.TrainConfig(epochs=1, batch_size=4, resolution=8, channels=[4],
                         blocks_per_stage=[1], feature_dim=4)
    assert aa.TrainConfig.from_toml(cfg.to_toml()).to_dict() == cfg.to_dict()
    run = aa.train(cfg, manifest)
    assert len(run.history) == 1
    report = run.evaluate(manifest)
    assert report["n_test"] == 8

    run.save(tmp / "m.atrl")
    again = aa.Run.load(tmp / "m.atrl")
    assert again.evaluate(manifest) == report
    assert again.config.to_dict() == cfg.to_dict()

    for bad in (lambda: aa.TrainConfig(nonsense=1), lambda: aa.TrainConfig(lr0=-1.0)):
        try:
            bad()
        except ValueError as e:
            assert str(e).startswith("config"), str(e)
        else:
            raise AssertionError("bad config accepted")

assert aa.top_k_accuracy([[3.0, 2.0, 1.0]], [2], 3) == 100.0
assert aa.top_k_accuracy([[3.0, 2.0, 1.0]], [2], 2) == 0.0
src = [i / 15 for i in range(16)]
vals = aa.bicubic_resize(src, 4, 4, 1, (4, 4))
assert max(abs(a - b) for a, b in zip(vals, src)) < 1e-12
"#,
    );
}
