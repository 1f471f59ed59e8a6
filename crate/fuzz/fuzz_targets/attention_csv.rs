#![no_main]

use asa_geo::attention_export::{attention_to_csv, parse_attention_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(w) = parse_attention_csv(text) {
        assert_eq!(parse_attention_csv(&attention_to_csv(&w)).expect("round trip"), w);
    }
});
