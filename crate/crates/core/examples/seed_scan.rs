// temporary scratch: scan untrained-model eval accuracy by seed
use mars_core::config;
use mars_core::masks;
use mars_core::rng::Rng;

fn main() {
    let text = std::fs::read_to_string("crates/cli/configs/mnist-2fc-soft.cfg").unwrap();
    let cfg = config::parse(&text).unwrap();
    let (_, test) = config::load_dataset(&cfg.dataset).unwrap();
    for seed in 1..=10u64 {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let mut rng = Rng::from_seed(seed);
        let model = config::build_model(&cfg.model, &train_cfg, &mut rng).unwrap();
        let rounded = masks::round_masks(&model.masks);
        let values: Vec<Vec<f64>> = model.masks.iter().map(|(id, _)| rounded.values(id)).collect();
        let acc = model.accuracy(&test.inputs, &test.labels, Some(&values), 512).unwrap();
        let plain = model.accuracy(&test.inputs, &test.labels, None, 512).unwrap();
        println!("seed {seed}: rounded-mask acc {acc:.4}, unmasked acc {plain:.4}");
    }
}
