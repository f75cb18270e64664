//! Annotation files must parse and validate or fail with an error; a file
//! that validates must convert to training annotations without panicking.
#![no_main]

use libfuzzer_sys::fuzz_target;
use vidseg_core::vidgen::Dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(ds) = Dataset::from_json(text) else {
        return;
    };
    for v in &ds.videos {
        let _ = ds.video_annotation(v.id);
    }
    let round = Dataset::from_json(&ds.to_json()).expect("serialized datasets parse");
    assert_eq!(round, ds);
});
