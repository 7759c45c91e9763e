#![no_main]

use geppml::costs::CostMatrix;
use libfuzzer_sys::fuzz_target;

// Anything that parses must survive a write/read cycle unchanged.
fuzz_target!(|data: &[u8]| {
    if let Ok(m) = CostMatrix::read_csv(data, 7.0) {
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(CostMatrix::read_csv(buf.as_slice(), 7.0).unwrap(), m);
    }
});
