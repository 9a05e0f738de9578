#![no_main]

use distcap::distmetrics::Aggregate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(report) = Aggregate::parse(text) {
        Aggregate::parse(&report.to_text()).expect("re-parse");
    }
});
