#![no_main]

use libfuzzer_sys::fuzz_target;
use platoon::metrics::{parse_trace_csv, trace_csv_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(trace) = parse_trace_csv(text) {
        // Written traces are stable under a second round trip.
        let once = trace_csv_string(&trace);
        let again = parse_trace_csv(&once).expect("re-parse written trace");
        assert_eq!(trace_csv_string(&again), once);
    }
});
