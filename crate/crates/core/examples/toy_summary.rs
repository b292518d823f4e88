//! Run the toy pipeline and print a one-screen summary.
//!
//! `cargo run --release -p mergeforge --example toy_summary [config.json]`

use std::time::Instant;

use mergeforge::mask::{build_mask, mask_stats};
use mergeforge::merge::{merge, MergeMethod};
use mergeforge::toy::{adversarial_k_ablation, run_pipeline, ToyConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ToyConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => ToyConfig::default(),
    };
    let start = Instant::now();
    let r = run_pipeline(&cfg)?;
    println!("pipeline {:.1}s", start.elapsed().as_secs_f64());
    println!("pretrain loss {:.4} -> {:.4}", r.pretrain_initial_loss, r.pretrain_final_loss);
    for f in &r.finetune {
        println!("finetune {} mse {:.4} -> {:.4}", f.task_id, f.initial_mse, f.final_mse);
    }
    for v in Variant::ALL {
        let mses: Vec<String> = (0..r.tasks.len()).map(|m| format!("{:.4}", r.mse(m, v))).collect();
        let ratios: Vec<String> = r.mse_ratios(v).iter().map(|x| format!("{x:.2}")).collect();
        println!("{:14} mse [{}] ratio [{}]", v.as_str(), mses.join(" "), ratios.join(" "));
    }
    println!("routing accuracy {:.3}", r.routing_accuracy);
    println!("selfish ratio {:.4}", r.mask_stats.selfish_ratio);
    let ids = r.task_ids();
    for method in [MergeMethod::TaskArithmetic, MergeMethod::Ties] {
        let mut line = format!("  selfish by M ({method:?}):");
        for m in 2..=ids.len() {
            let mut recipe = r.config.recipe(ids[..m].to_vec());
            recipe.method = method;
            let merged = merge(&recipe, &r.task_vectors[..m])?;
            let masks = r.task_vectors[..m]
                .iter()
                .map(|tv| build_mask(tv, &merged, recipe.lambda))
                .collect::<Result<Vec<_>, _>>()?;
            let stats = mask_stats(&masks)?;
            let per = |prefix: &str| {
                let n = masks[0].masks.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum::<usize>();
                let hits = masks[0]
                    .masks
                    .names()
                    .filter(|k| k.starts_with(prefix))
                    .map(|k| {
                        (0..masks[0].masks.require(k).unwrap().len())
                            .filter(|&i| masks.iter().map(|s| s.masks.require(k).unwrap().data()[i]).sum::<f32>() == 1.0)
                            .count()
                    })
                    .sum::<usize>();
                hits as f64 / n as f64
            };
            line += &format!(" M={m} {:.3} (vision {:.3} lang {:.3})", stats.selfish_ratio, per("vision"), per("lang"));
        }
        println!("{line}");
    }
    for s in &r.lambda_sweep {
        println!("  lambda {:.1} active {:.4} selfish {:.4}", s.lambda, s.mean_active_ratio, s.selfish_ratio);
    }
    println!("block distance {:?}", r.block_distance);
    println!("progressive {:?}", r.progressive);
    if r.tasks.len() >= 2 {
        let a = adversarial_k_ablation(&r, 50)?;
        println!("ablation natural {:?}", a.natural);
        println!("ablation adversarial v {:.3} k {:.3}", a.adversarial_v_accuracy, a.adversarial_k_accuracy);
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
