use revoxf::data::oracle::{generate_oracle_dataset, SceneSpec};
use revoxf::metrics::psnr;
use revoxf::render::render_image;
use revoxf::train::{train, StageConfig, StageWeights, TrainConfig};

fn acceptance_cfg(weights: StageWeights, rel_weighting: bool) -> TrainConfig {
    let mut cfg = TrainConfig::desk_preset();
    cfg.seed = 7;
    cfg.batch_rays = 1024;
    cfg.rs_every = 2;
    cfg.ds_patches_per_step = 2;
    cfg.stages = vec![
        StageConfig { dims: [64, 64, 64], steps: 1000, lr_density: 0.1, lr_color: 0.01, weights },
        StageConfig { dims: [128, 128, 128], steps: 2000, lr_density: 0.1, lr_color: 0.01, weights },
    ];
    cfg.reliability_weighting = rel_weighting;
    cfg
}

fn run(name: &str, weights: StageWeights, rel_weighting: bool) {
    let mut spec = SceneSpec::sample_spec();
    spec.cameras.width = 80;
    spec.cameras.height = 80;
    let dataset = generate_oracle_dataset(&spec, 4, 2, 42, false);
    let cfg = acceptance_cfg(weights, rel_weighting);
    let t0 = std::time::Instant::now();
    let eval_ds = dataset.clone();
    let out = train(dataset, cfg.clone(), |_| {}).unwrap();
    let rcfg = revoxf::render::RenderConfig {
        step_size: cfg.step_size, background: cfg.background, density_shift: cfg.density_shift,
        sigmoid_color: cfg.sigmoid_color, early_stop_t: cfg.early_stop_t,
    };
    let mut mean = 0.0;
    for view in &eval_ds.test {
        let (rgb, _) = render_image(&out.grid, &view.camera, &rcfg, eval_ds.near, eval_ds.far).unwrap();
        mean += psnr(&rgb, &view.rgb).unwrap();
    }
    println!("{name}: test psnr {:.2} ({:.0?})", mean / eval_ds.test.len() as f64, t0.elapsed());
}

fn main() {
    let which: u32 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let tuned = StageWeights {
        lambda_rel: 0.1, lambda_unr: 0.01,
        lambda_f: 0.03, lambda_d: 0.3, lambda_ds: 0.01,
        ..StageWeights::default()
    };
    let rel_only = StageWeights {
        lambda_rel: 0.1, lambda_unr: 0.0, lambda_f: 0.0, lambda_d: 0.0, lambda_ds: 0.0,
        ..StageWeights::default()
    };
    match which {
        0 => run("baseline", StageWeights::zeroed(), false),
        1 => run("rel-only", rel_only, false),
        2 => run("full", tuned, true),
        _ => unreachable!(),
    }
}
