#![no_main]

use libfuzzer_sys::fuzz_target;
use situated::backend::parse_mock_script;

fuzz_target!(|data: &[u8]| {
    let Ok(json) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_mock_script(json) {
        assert!(entries.iter().all(|(_, replies)| !replies.is_empty()));
    }
});
