#![no_main]

use libfuzzer_sys::fuzz_target;
use situated::prompts::{placeholders, substitute, Bindings};

fuzz_target!(|data: &[u8]| {
    let Ok(body) = std::str::from_utf8(data) else { return };
    let names = placeholders(body);
    let mut bindings = Bindings::new();
    for n in &names {
        bindings = bindings.with(n.clone(), format!("<{n}>"));
    }
    let rendered = substitute(body, &bindings).expect("every placeholder is bound");
    for n in &names {
        assert!(rendered.contains(&format!("<{n}>")));
    }
    if let Some(first) = names.first() {
        let partial = Bindings::new();
        assert_eq!(substitute(body, &partial), Err(first.clone()));
    }
});
