#![no_main]

use libfuzzer_sys::fuzz_target;
use situated::crdpo::parse_pairs_jsonl;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pairs) = parse_pairs_jsonl(text) {
        let again: String = pairs.iter().map(|p| p.to_json_line() + "\n").collect();
        assert_eq!(parse_pairs_jsonl(&again).expect("re-encoded pairs parse"), pairs);
    }
});
