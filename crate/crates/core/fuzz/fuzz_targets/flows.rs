#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = geppml::panel::read_flows(data, "flows.csv") {
        for r in &rows {
            assert!(r.flow >= 0.0 && r.flow.is_finite());
        }
    }
});
