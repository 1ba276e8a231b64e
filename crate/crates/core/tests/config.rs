use dspert_core::{Aggregation, Error, HeadKind, RunConfig};

#[test]
fn defaults_are_valid_and_round_trip() {
    let cfg = RunConfig::default();
    cfg.check().unwrap();
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn keys_map_onto_model_and_training() {
    let cfg = RunConfig::from_toml(
        r#"
seed = 4
[model]
num_layers = 3
hidden_size = 16
maximum_span_size = 5
span_depth = 1
initial_aggregation = "mul_attention"
share_weights = true
[train]
number_of_epochs = 3
boundary_smoothing_epsilon = 0.2
learning_rate_other = 0.01
[data.synthetic]
nest_rate = 0.9
"#,
    )
    .unwrap();
    let m = cfg.model_config(30, 3);
    assert_eq!(
        (m.layers, m.hidden, m.max_span, m.span_depth),
        (3, 16, 5, 1)
    );
    assert_eq!(m.aggregation, Aggregation::MulAttention);
    assert!(m.share_weights && m.use_bilstm);
    assert_eq!((m.vocab_size, m.num_types), (30, 3));
    let t = cfg.train_config();
    assert_eq!((t.epochs, t.smoothing.epsilon, t.lr_fresh), (3, 0.2, 0.01));
    assert_eq!(cfg.data.synthetic.unwrap().nest_rate, 0.9);
    // Depth follows the layer count when unset.
    let deep = RunConfig::from_toml("[model]\nnum_layers = 3").unwrap();
    assert_eq!(deep.model_config(5, 1).span_depth, 3);
}

#[test]
fn head_dependent_defaults() {
    let cfg = RunConfig::from_toml("[model]\nhead = \"biaffine-no-prod\"").unwrap();
    let m = cfg.model_config(5, 2);
    assert_eq!(m.head, HeadKind::BiaffineNoProd);
    assert!(!m.use_bilstm);
    assert_eq!(m.span_depth, 0);
    assert!(RunConfig::from_toml("[model]\nhead = \"biaffine\"\nuse_bilstm = true").is_err());
    assert!(RunConfig::from_toml("[model]\nhead = \"shallow-max\"\nspan_depth = 1").is_err());
}

#[test]
fn invalid_settings_are_rejected() {
    for bad in [
        "learning_rate = 1",
        "[model]\nhidden = 3",
        "[train]\nwarmup_fraction = 1.0",
        "[train]\nboundary_smoothing_epsilon = 1.0",
        "[model]\nlstm_layers = 2",
        "[model]\nhidden_size = 30\nnum_heads = 4",
        "[model]\nhead = \"crf\"",
        "[model]\nspan_depth = 5",
    ] {
        assert!(
            matches!(RunConfig::from_toml(bad), Err(Error::Config(_))),
            "{bad}"
        );
    }
}

#[test]
fn load_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        RunConfig::load(&dir.path().join("x.toml")),
        Err(Error::Io { .. })
    ));
    let path = dir.path().join("ok.toml");
    std::fs::write(&path, "seed = 3").unwrap();
    assert_eq!(RunConfig::load(&path).unwrap().seed, 3);
}
