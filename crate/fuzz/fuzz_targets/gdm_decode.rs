#![no_main]

use gdps_core::gradbundle::gdm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = gdm::decode(data) {
        // Accepted payloads must re-encode to the same bytes.
        let again = gdm::encode(m.rows, m.cols, &m.data).expect("decoded matrix re-encodes");
        assert_eq!(again, data);
    }
});
