#![no_main]

use libfuzzer_sys::fuzz_target;
use situated::methods::{extract_answer, extract_final_line, is_removal_only, split_sentences};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(a) = extract_answer(text) {
        assert!(!a.is_empty());
    }
    let _ = extract_final_line(text);
    let sentences = split_sentences(text);
    // Dropping sentences is always a removal.
    let kept: Vec<&str> = sentences.iter().step_by(2).map(String::as_str).collect();
    let _ = is_removal_only(text, &kept.join(" "));
});
