#![no_main]

use libfuzzer_sys::fuzz_target;
use naturalize_core::model::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode_checkpoint::<f32>(data) {
        let bytes = encode_checkpoint(&params);
        assert_eq!(encode_checkpoint(&decode_checkpoint::<f32>(&bytes).unwrap()), bytes);
    }
});
