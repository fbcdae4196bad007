#![no_main]

use gsslam::gaussian_map::parse_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(map) = parse_checkpoint(data) else { return };
    // A decoded map must re-encode to something that decodes to the same bytes again.
    let mut once = Vec::new();
    map.write_checkpoint(&mut once).unwrap();
    let again = parse_checkpoint(&once).expect("re-encoded checkpoint must parse");
    let mut twice = Vec::new();
    again.write_checkpoint(&mut twice).unwrap();
    assert_eq!(once, twice);
});
