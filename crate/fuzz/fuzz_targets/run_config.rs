#![no_main]

use asa_geo::config::RunConfig;
use libfuzzer_sys::fuzz_target;

// First line: a JSON run config (blank for defaults); remaining lines:
// key=value overrides.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut lines = text.lines();
    let head = lines.next().unwrap_or("");
    let base = if head.trim().is_empty() {
        RunConfig::default()
    } else {
        match RunConfig::from_json(head) {
            Ok(c) => c,
            Err(_) => return,
        }
    };
    let overrides: Vec<&str> = lines.collect();
    if let Ok(cfg) = base.with_overrides(&overrides) {
        let _ = cfg.validate();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).expect("round trip"), cfg);
    }
});
