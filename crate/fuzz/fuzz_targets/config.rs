//! Configuration files must load or fail with an error; accepted files must
//! survive a serialization round trip.
#![no_main]

use libfuzzer_sys::fuzz_target;
use vidseg_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(c) = RunConfig::from_toml(text) else {
        return;
    };
    let round = RunConfig::from_toml(&c.to_toml()).expect("serialized configs load");
    assert_eq!(round, c);
});
