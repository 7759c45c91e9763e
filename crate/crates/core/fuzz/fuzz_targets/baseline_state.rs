#![no_main]

use geppml::report::BaselineState;
use libfuzzer_sys::fuzz_target;

// A state that loads must also rebuild its panel and cost matrix without
// panicking, whatever the result.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(state) = BaselineState::from_json(text, "state.json") {
        let _ = state.panel();
        let _ = state.cost_matrix(state.sigma);
    }
});
