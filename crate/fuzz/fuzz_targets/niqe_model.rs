#![no_main]

use gsslam::niqe::parse_model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = parse_model(data) else { return };
    let mut out = Vec::new();
    model.write(&mut out).unwrap();
    assert_eq!(parse_model(&out).unwrap(), model);
});
