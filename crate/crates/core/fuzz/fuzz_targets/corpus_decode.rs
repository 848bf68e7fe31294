#![no_main]

use diffwin::train::{CharCorpus, FIRST_DATA_ID};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(corpus) = CharCorpus::from_bytes(data, 0.1) {
        let vocab = corpus.vocab_size();
        let ids = corpus.train_ids().iter().chain(corpus.held_out_ids());
        for &id in ids {
            assert!((FIRST_DATA_ID..vocab).contains(&id));
        }
    }
});
