#![no_main]

use gdps_core::decomposer::DecompositionPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Parsing validates; errors are fine, panics are not.
    let _ = DecompositionPlan::from_json(data);
});
