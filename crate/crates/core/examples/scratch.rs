use ilra_core::adapter::{AdapterSet, AdapterSpec};
use ilra_core::model::{Model, ModelConfig};
use ilra_core::tasks::{gen_grounding, Sample};
use ilra_core::train::{train_adapters, TrainConfig};
use ilra_core::rng;

fn run(model: &Model<f64>, cfg: &ModelConfig, samples: &[Sample], rank: usize, alpha: f64, label: &str) {
    let spec = AdapterSpec::image_lora(rank, alpha, vec![vec![0, 1]; cfg.n_layers]);
    let mut arng = rng::stream(7, "adapter");
    let adapters: AdapterSet<f64> = AdapterSet::init(spec, cfg, &mut arng).unwrap();
    let tc = TrainConfig { epochs: 500, batch_size: 8, ..TrainConfig::default() };
    let metrics = train_adapters(model, &adapters, samples, &tc, 77).unwrap();
    let best = metrics.iter().map(|m| m.loss).fold(f64::INFINITY, f64::min);
    println!("{label} rank={rank} alpha={alpha}: l100={:.3} l250={:.3} best={best:.4}", metrics[99].loss, metrics[249].loss);
}

fn main() {
    let cfg = ModelConfig::toy();
    let examples = gen_grounding(1, 8, (3, 3), 4, cfg.vocab, cfg.max_seq).unwrap();
    let samples: Vec<Sample> = examples.iter().map(Sample::from).collect();

    // Variant A: stock model
    let mut rng0 = rng::stream(42, "init");
    let model: Model<f64> = Model::init(cfg.clone(), &mut rng0).unwrap();
    run(&model, &cfg, &samples, 8, 64.0, "stock       ");

    // Variant B: undamped residual projections (scale W_O, W_out up by sqrt(2*n_layers))
    let boost = (2.0 * cfg.n_layers as f64).sqrt();
    let model_b: Model<f64> = {
        let mut r = rng::stream(42, "init");
        let m = Model::init(cfg.clone(), &mut r).unwrap();
        for lw in &m.layers {
            lw.w_o.update_data(|d| d.iter_mut().for_each(|v| *v *= boost));
            lw.w_out.update_data(|d| d.iter_mut().for_each(|v| *v *= boost));
        }
        m
    };
    run(&model_b, &cfg, &samples, 8, 16.0, "undamped    ");
    run(&model_b, &cfg, &samples, 8, 64.0, "undamped a64");

    // Variant C: undamped + bigger unembed
    let model_c: Model<f64> = {
        let mut r = rng::stream(42, "init");
        let m = Model::init(cfg.clone(), &mut r).unwrap();
        for lw in &m.layers {
            lw.w_o.update_data(|d| d.iter_mut().for_each(|v| *v *= boost));
            lw.w_out.update_data(|d| d.iter_mut().for_each(|v| *v *= boost));
        }
        m.unembed.update_data(|d| d.iter_mut().for_each(|v| *v *= 4.0));
        m
    };
    run(&model_c, &cfg, &samples, 8, 16.0, "undamped+ue4");
    run(&model_c, &cfg, &samples, 8, 64.0, "undamped+ue4 a64");
}
