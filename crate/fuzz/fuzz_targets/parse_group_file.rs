#![no_main]

use distcap::groups::GroupFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(file) = GroupFile::parse(text) {
        let again = GroupFile::parse(&file.to_text()).expect("re-parse");
        assert_eq!(file.groups.len(), again.groups.len());
        assert_eq!(again.to_text(), file.to_text());
    }
});
