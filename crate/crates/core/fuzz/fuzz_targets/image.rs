#![no_main]

use libfuzzer_sys::fuzz_target;
use naturalize_core::image::decode_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert_eq!(img.rgb().len(), img.width() * img.height() * 3);
    }
});
