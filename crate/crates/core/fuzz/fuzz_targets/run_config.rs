#![no_main]

use libfuzzer_sys::fuzz_target;
use situated::cli::RunConfig;
use situated::crdpo::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::from_toml(text) {
        let _ = config.method_ids();
    }
    let _ = TrainConfig::from_toml(text);
});
