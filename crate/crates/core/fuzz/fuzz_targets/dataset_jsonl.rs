#![no_main]

use libfuzzer_sys::fuzz_target;
use situated::datamodel::{parse_dataset, LoadOptions};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for require_wrong_context in [true, false] {
        if let Ok(instances) = parse_dataset(text, LoadOptions { require_wrong_context }) {
            for i in &instances {
                assert!(!i.id.is_empty());
                assert!(!i.gold_answers.is_empty());
            }
        }
    }
});
