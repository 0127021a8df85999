#![no_main]

use libfuzzer_sys::fuzz_target;
use platoon::channel::load_curve;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(curve) = load_curve(text) {
        for d in [0.0, 1.0, 85.0, 1e4, f64::MAX] {
            let p = curve.pdr_at_distance(d);
            assert!((0.0..=1.0).contains(&p));
        }
    }
});
