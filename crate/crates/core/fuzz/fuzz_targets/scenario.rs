#![no_main]

use geppml::scenario::ScenarioFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = ScenarioFile::parse(text) {
        let again = ScenarioFile::parse(&file.to_toml()).expect("serialized scenario parses");
        assert_eq!(again.scenario.edits.len(), file.scenario.edits.len());
    }
});
