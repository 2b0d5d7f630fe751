use std::ffi::CString;
use std::sync::Once;

use instmix_py::instmix_module;
use pyo3::prelude::*;

static INIT: Once = Once::new();

fn run_python(code: &str) -> PyResult<()> {
    INIT.call_once(|| {
        pyo3::append_to_inittab!(instmix_module);
        Python::initialize();
    });
    let code = CString::new(code).unwrap();
    Python::attach(|py| py.run(&code, None, None))
}

#[test]
fn geometry_and_mixing() {
    run_python(
        r#"
import instmix as im
a = im.BBox(0, 0, 10, 10)
assert abs(im.iou(a, im.BBox(5, 0, 15, 10)) - 1 / 3) < 1e-12
assert im.resize_box_half(im.BBox(20, 10, 60, 50), 100, 80).as_tuple() == (35, 25, 55, 45)
e = im.expand_box(im.BBox(10, 10, 20, 20), 0.2, 100, 100)
assert e.as_tuple() == (9, 9, 21, 21)
assert im.expand_box(a, 0.2, 100, 100).x1 == 0
mask = im.build_mask([im.BBox(2, 2, 6, 6)], 0.0, 3, 8, 8)
assert mask.slice_popcount(0) == 16 and mask.slice_popcount(2) == 16
mixed = im.mix_clips(im.Clip.filled(3, 8, 8, 1, 9), im.Clip.filled(3, 8, 8, 1, 1), mask)
assert mixed.get(1, 3, 3, 0) == 9 and mixed.get(1, 0, 0, 0) == 1
assert len(im.rasterize([a], 12, 12)) == 144
"#,
    )
    .unwrap();
}

#[test]
fn errors_become_python_exceptions() {
    run_python(
        r#"
import instmix as im
try:
    im.mix_clips(im.Clip.filled(1, 4, 4, 1, 0), im.Clip.filled(1, 5, 4, 1, 0), im.build_mask([], 0.2, 1, 4, 4))
except ValueError:
    pass
else:
    raise AssertionError("dimension mismatch accepted")
try:
    im.Clip(1, 2, 2, 1, b"\x00")
except ValueError:
    pass
else:
    raise AssertionError("short payload accepted")
"#,
    )
    .unwrap();
}

#[test]
fn model_and_metrics() {
    run_python(
        r#"
import instmix as im
m = im.Model(4, channels=1, grid=2, hidden_dim=3, seed=9)
assert m.input_dim == 4 and m.num_params == 3 * 4 + 3 + 4 * 3 + 4
p = m.forward([0.1, -0.2, 0.3, 0.0])
assert abs(sum(p) - 1) < 1e-12
t = im.ema_update(m, im.Model(4, channels=1, grid=2, hidden_dim=3, seed=1), 1.0)
assert t.parameters() == m.parameters()
assert im.compute_lambda([0.9, 0.89], 0.9) == 0.5
g = [("x", im.BBox(0, 0, 4, 4), 1)]
assert im.average_precision([("x", im.BBox(0, 0, 4, 4), 1, 0.3)], g, 1) == 1.0
"#,
    )
    .unwrap();
}
