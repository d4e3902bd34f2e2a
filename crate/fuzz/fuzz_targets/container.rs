#![no_main]
use libfuzzer_sys::fuzz_target;
use sparsenet_core::container::decode_container;

fuzz_target!(|data: &[u8]| {
    let _ = decode_container(data);
});
