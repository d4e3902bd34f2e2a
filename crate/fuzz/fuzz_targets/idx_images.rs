#![no_main]
use libfuzzer_sys::fuzz_target;
use sparsenet_core::data::parse_idx_images;

fuzz_target!(|data: &[u8]| {
    let _ = parse_idx_images(data);
});
