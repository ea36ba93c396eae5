#![no_main]

use effo_core::feature_store::{from_bytes, to_bytes, validate};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(set) = from_bytes(data) else { return };
    if validate(&set).is_empty() {
        let bytes = to_bytes(&set).expect("valid set must encode");
        assert_eq!(from_bytes(&bytes).expect("own output must decode"), set);
    } else {
        assert!(to_bytes(&set).is_err(), "writer accepted an invalid set");
    }
});
