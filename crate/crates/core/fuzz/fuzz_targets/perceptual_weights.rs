#![no_main]

use libfuzzer_sys::fuzz_target;
use naturalize_core::losses::PerceptualNet;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = PerceptualNet::<f32>::from_bytes(data) {
        let bytes = net.to_bytes();
        assert_eq!(PerceptualNet::<f32>::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
