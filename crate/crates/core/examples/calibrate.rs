//! Scratch calibration harness (temporary, removed before release).

use std::time::Instant;

use cloudseg::lidar::{generate_corpus, SyntheticSceneSpec};
use cloudseg::preprocess::{assemble_datasets, ScaleConfig, SplitSpec};
use cloudseg::train::{run_pipeline, Ablation, HyperGrids, PipelineConfig};

fn main() {
    let use_full_grid = std::env::args().any(|a| a == "--full-grid");
    let scale = ScaleConfig::desk();
    let template = SyntheticSceneSpec::for_scale(&scale, 0);
    let corpus = generate_corpus(&template, 80, 7).unwrap();
    let bundle = assemble_datasets(&corpus, &scale, &SplitSpec::desk_default()).unwrap();

    for seed in [1u64, 2, 3] {
        let t0 = Instant::now();
        let mut cfg = PipelineConfig::desk_default(seed);
        if !use_full_grid {
            cfg.grids = HyperGrids::single_point();
        }
        let full = run_pipeline(&corpus, &bundle, &cfg, Ablation::Full, None).unwrap();
        let no_noisy = run_pipeline(
            &corpus,
            &bundle,
            &cfg,
            Ablation::NoNoisy,
            full.transferred.as_ref(),
        )
        .unwrap();
        let no_pre = run_pipeline(&corpus, &bundle, &cfg, Ablation::NoPretrain, None).unwrap();
        println!(
            "seed {seed}: full {:.4} | no_noisy {:.4} | no_pretrain {:.4} | baseline {:.4} | noisy-row {:.4}  ({:.0?})",
            full.reports.model_holdout.f1,
            no_noisy.reports.model_holdout.f1,
            no_pre.reports.model_holdout.f1,
            full.reports.baseline_holdout.f1,
            full.reports.noisy_holdout.f1,
            t0.elapsed()
        );
        for s in &full.stages {
            println!(
                "  full stage{}: point ({:.5},{:.2},{:.2}) best_epoch {} val {:.4}",
                s.stage.index(),
                s.chosen_point.0,
                s.chosen_point.1,
                s.chosen_point.2,
                s.best_epoch,
                s.best_val
            );
        }
    }
}
