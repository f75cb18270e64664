//! Arbitrary JSON run-length records must decode or fail cleanly, and every
//! decoded mask must re-encode to a record that decodes identically.
#![no_main]

use libfuzzer_sys::fuzz_target;
use vidseg_core::maskops::{rle_decode, rle_encode, Rle};

fuzz_target!(|data: &[u8]| {
    let Ok(rle) = serde_json::from_slice::<Rle>(data) else {
        return;
    };
    let Ok(mask) = rle_decode(&rle) else {
        return;
    };
    let again = rle_encode(&mask).expect("decoded masks are binary");
    assert_eq!(rle_decode(&again).expect("encoded records decode"), mask);
});
