#![no_main]

use libfuzzer_sys::fuzz_target;
use situated::backend::parse_chat_response;

fuzz_target!(|data: &[u8]| {
    let Ok(body) = std::str::from_utf8(data) else { return };
    if let Ok((_, samples)) = parse_chat_response(body, true) {
        for s in samples {
            if let Some(lps) = s.logprobs {
                assert!(lps.iter().all(|t| !t.logprob.is_nan()));
            }
        }
    }
    let _ = parse_chat_response(body, false);
});
