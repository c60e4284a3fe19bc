#![no_main]

use libfuzzer_sys::fuzz_target;
use situated::correctness::parse_yes_no;
use situated::methods::parse_true_false;

fuzz_target!(|data: &[u8]| {
    let Ok(reply) = std::str::from_utf8(data) else { return };
    let _ = parse_true_false(reply);
    let _ = parse_yes_no(reply);
});
