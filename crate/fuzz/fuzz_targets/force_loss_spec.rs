#![no_main]

use libfuzzer_sys::fuzz_target;
use platoon::channel::ForcedLoss;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(loss) = text.parse::<ForcedLoss>() {
        assert!(loss.first_tick <= loss.last_tick);
        assert!(loss.width() >= 1);
    }
});
