#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| pharmafind_fuzz::checks::pharmacy_seed(data));
