#![no_main]

use ahcf::harness::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(traj) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&traj).expect("decoded trajectory encodes");
        let back = checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert!(back == traj);
    }
});
