use logsd::embedder::EmbeddingTable;
use logsd::masking::MaskConfig;
use logsd::model::ModelConfig;
use logsd::synthbench::{benchmark_train_config, generate, synthetic_catalog, SynthConfig};
use logsd::trainer::{train, TrainConfig};

#[test]
fn synthbench_loss_falls_over_ten_epochs() {
    let cfg = SynthConfig::default();
    let ds = generate(&cfg).unwrap();
    let table = EmbeddingTable::from_catalog(&synthetic_catalog(&cfg).unwrap(), cfg.seed, None);
    let train_cfg = TrainConfig {
        max_epochs: 10,
        ..benchmark_train_config(&cfg)
    };
    let out = train(&ds.train, table, ModelConfig::default(), MaskConfig::default(), &train_cfg).unwrap();
    assert_eq!(out.log.len(), 10);
    let (first, tenth) = (out.log[0].total, out.log[9].total);
    assert!(tenth < first, "epoch 1 loss {first}, epoch 10 loss {tenth}");
}
