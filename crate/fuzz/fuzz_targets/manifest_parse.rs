#![no_main]

use gdps_core::gradbundle::BundleManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = BundleManifest::from_json(data) {
        let back = BundleManifest::from_json(m.to_json().as_bytes()).expect("serialized manifest parses");
        assert_eq!(back, m);
    }
});
