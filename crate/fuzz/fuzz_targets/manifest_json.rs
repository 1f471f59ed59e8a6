#![no_main]

use asa_geo::data::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::from_json(text) {
        let back = DatasetManifest::from_json(&m.to_json().expect("manifest serializes")).expect("round trip");
        assert_eq!(back.len(), m.len());
        let _ = m.label_map();
    }
});
