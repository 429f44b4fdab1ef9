use std::path::{Path, PathBuf};

use egosag::config::RunConfig;

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn shipped_configs_match_presets() {
    let mut tiny = RunConfig::tiny();
    tiny.data.train_manifest = Some("data/tiny/train.json".into());
    tiny.data.val_manifest = Some("data/tiny/val.json".into());
    let text = std::fs::read_to_string(shipped("tiny.toml")).unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), tiny);
    let text = std::fs::read_to_string(shipped("default.toml")).unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), RunConfig::default());
}
