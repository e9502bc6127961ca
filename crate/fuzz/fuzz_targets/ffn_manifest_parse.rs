#![no_main]

use gdps_core::decomposer::FfnManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = FfnManifest::from_json(data);
});
