#![no_main]

use diffwin::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        // Anything accepted must survive re-encoding unchanged.
        let again = Checkpoint::from_bytes(&ckpt.to_bytes()).expect("re-encoded checkpoint parses");
        assert_eq!(again, ckpt);
        let _ = ckpt.to_model();
    }
});
