#![no_main]

use diffwin::train::{Task, TaskConfig};
use diffwin_cli::config::{parse_file, Overrides, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(file) = parse_file(text) else {
        return;
    };
    let Ok(cfg) = RunConfig::resolve(Some(&file), &Overrides::default()) else {
        return;
    };
    // Corpus loading touches the filesystem; stick to the synthetic tasks.
    if matches!(cfg.task, TaskConfig::CharLm { .. }) {
        return;
    }
    if let Ok(task) = Task::new(&cfg.task, cfg.train.seed) {
        let _ = cfg.model_config(&task);
    }
});
