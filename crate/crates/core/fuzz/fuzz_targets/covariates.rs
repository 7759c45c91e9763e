#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = geppml::panel::read_covariates(data, "covariates.csv");
});
