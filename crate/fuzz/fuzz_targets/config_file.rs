#![no_main]

use libfuzzer_sys::fuzz_target;
use platoon::cli::CliConfigFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = CliConfigFile::from_json(text) {
        // Validated configs must produce a usable spawn plan.
        let plan = cfg.scenario.spawn_plan();
        assert_eq!(plan.len(), cfg.scenario.truck_count as usize);
    }
});
