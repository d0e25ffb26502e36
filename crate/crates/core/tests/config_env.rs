use mpmri_core::config::{RunConfig, SEED_ENV};
use mpmri_core::Error;

// The only test here that touches the environment; the other uses from_toml.
#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 4\n[paths]\nwork_dir = \"out\"\n").unwrap();

    std::env::remove_var(SEED_ENV);
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.paths.work_dir, dir.path().join("out"));

    std::env::set_var(SEED_ENV, "77");
    assert_eq!(RunConfig::load(&path).unwrap().seed, 77);

    std::env::set_var(SEED_ENV, "seven");
    assert!(matches!(RunConfig::load(&path), Err(Error::InvalidConfig(_))));
    std::env::remove_var(SEED_ENV);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["phantom.toml", "smoke.toml"] {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        let cfg = RunConfig::from_toml(&text, &dir).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
