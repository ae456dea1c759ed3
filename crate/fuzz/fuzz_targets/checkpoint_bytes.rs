#![no_main]

use adacs::nn::checkpoint::from_bytes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // must never panic, whatever the bytes
    let _ = from_bytes::<f32>(data);
});
