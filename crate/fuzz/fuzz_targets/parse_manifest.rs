#![no_main]

use distcap::embedstore::{manifest_to_text, parse_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(entries) = parse_manifest(text) {
        let again = parse_manifest(&manifest_to_text(&entries)).expect("re-parse");
        assert_eq!(entries, again);
    }
});
