use std::path::Path;

use mustdrop_core::harness::{Baseline, PipelineConfig};

fn load(name: &str) -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    PipelineConfig::load(&path).unwrap()
}

#[test]
fn shipped_default_matches_built_in_default() {
    assert_eq!(load("default.toml"), PipelineConfig::default());
}

#[test]
fn shipped_variants_differ_only_where_named() {
    let mut fixed = load("fixed_gamma.toml");
    assert_eq!(fixed.prefill.gamma, Some(0.025));
    fixed.prefill.gamma = None;
    fixed.prefill.budget = PipelineConfig::default().prefill.budget;
    assert_eq!(fixed, PipelineConfig::default());

    let mut random = load("random_drop.toml");
    assert_eq!(random.baseline, Baseline::RandomDrop);
    random.baseline = Baseline::Mustdrop;
    assert_eq!(random, PipelineConfig::default());
}

#[test]
fn shipped_configs_round_trip() {
    for name in ["default.toml", "fixed_gamma.toml", "random_drop.toml"] {
        let c = load(name);
        let again = PipelineConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c, "{name}");
    }
}
