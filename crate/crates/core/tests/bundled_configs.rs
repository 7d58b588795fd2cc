use std::path::Path;

use freezelab_core::config::RunConfig;

#[test]
fn every_bundled_config_validates() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.strategy().unwrap();
            cfg.depths().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 15, "only {seen} configs found");
}

#[test]
fn pretrain_lr_defaults_to_lr() {
    let cfg = RunConfig::parse("lr = 0.001\n").unwrap();
    assert_eq!(cfg.pretrain().unwrap().lr, 0.001);
    let cfg = RunConfig::parse("lr = 0.001\npretrain_lr = 0.0003\n").unwrap();
    assert_eq!(cfg.pretrain().unwrap().lr, 0.0003);
    assert_eq!(cfg.train().unwrap().lr, 0.001);
}
