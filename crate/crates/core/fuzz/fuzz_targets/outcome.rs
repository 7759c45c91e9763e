#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = geppml::report::read_outcome(data) {
        let mut buf = Vec::new();
        geppml::report::write_outcome(&mut buf, &rows).unwrap();
        assert_eq!(geppml::report::read_outcome(buf.as_slice()).unwrap(), rows);
    }
});
