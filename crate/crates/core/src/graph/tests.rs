use super::*;

#[test]
fn default_config_is_consistent() {
    let cfg = GraphConfig::default();
    assert!(cfg.alpha1 < cfg.alpha2);
    assert!(cfg.lambda_init < cfg.lambda_max);
}
