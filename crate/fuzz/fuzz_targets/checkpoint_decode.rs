#![no_main]

use asa_geo::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded archive decodes");
        assert_eq!(again.encode(), ck.encode());
        let _ = asa_geo::GeoModel::from_checkpoint(&ck);
    }
});
