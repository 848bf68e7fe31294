#![no_main]

use diffwin::model::{parse_window_spec, ModelConfig, ModelKind};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = std::str::from_utf8(data) else {
        return;
    };
    if parse_window_spec(spec).is_ok() {
        for kind in [ModelKind::Seq2Seq, ModelKind::Classifier, ModelKind::LanguageModel] {
            if let Ok(cfg) = ModelConfig::tiny(kind, 10, 2).with_window_spec(spec, 3) {
                cfg.validate().expect("accepted spec yields a valid config");
            }
        }
    }
});
