#![no_main]

use gsslam::dataset::{format_trajectory, parse_groundtruth, parse_trajectory};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_groundtruth(text);
    if let Ok(poses) = parse_trajectory(text, "trajectory.txt") {
        let back = parse_trajectory(&format_trajectory(&poses), "trajectory.txt").expect("formatted trajectory must parse");
        assert_eq!(back.len(), poses.len());
    }
});
