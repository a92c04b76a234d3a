#![no_main]

use libfuzzer_sys::fuzz_target;
use naturalize_core::detector::DetectorModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = DetectorModel::from_bytes(data) {
        let bytes = model.to_bytes();
        assert_eq!(DetectorModel::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
