#![no_main]

use distcap::embedstore::parse_matrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_matrix(data) {
        assert_eq!(m.to_bytes(), data);
    }
});
