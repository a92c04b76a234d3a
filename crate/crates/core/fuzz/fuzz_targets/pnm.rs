#![no_main]

use libfuzzer_sys::fuzz_target;
use naturalize_core::image::{decode_pnm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        assert_eq!(decode_pnm(&encode_ppm(&img)).unwrap(), img);
    }
});
