#![no_main]

use libfuzzer_sys::fuzz_target;
use naturalize_core::training::read_metrics_log;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = read_metrics_log(text);
    }
});
