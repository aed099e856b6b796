//! Runs the three variants on planted corpora over several seeds and prints
//! per-step batch error, final cumulative error and rank trend.
//!
//! cargo run --release -p sea-core --example planted_ablation -- \
//!     [seeds=10] [dim=64] [steps=20] [corpus.<field>=<toml>] [plant.<field>=<toml>]

use std::time::Instant;

use sea_core::crossval::spearman;
use sea_core::embedding::EmbeddingConfig;
use sea_core::engine::Variant;
use sea_core::index::IndexConfig;
use sea_core::synthetic::{bench_settings, PlantSpec, PlantedBench, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mut seeds, mut dim, mut steps) = (10u64, 64usize, 20u64);
    let (mut corpus, mut plant) = (String::new(), String::new());
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("arguments are key=value")?;
        match k {
            "seeds" => seeds = v.parse()?,
            "dim" => dim = v.parse()?,
            "steps" => steps = v.parse()?,
            _ => match k.split_once('.') {
                Some(("corpus", f)) => corpus.push_str(&format!("{f} = {v}\n")),
                Some(("plant", f)) => plant.push_str(&format!("{f} = {v}\n")),
                _ => return Err(format!("unknown argument {k}").into()),
            },
        }
    }
    let base_spec: SyntheticSpec = toml::from_str(&corpus)?;
    let base_plant: PlantSpec = toml::from_str(&plant)?;
    let embed_cfg = EmbeddingConfig {
        dimension: dim,
        ..EmbeddingConfig::default()
    };
    let started = Instant::now();
    let variants = [Variant::Full, Variant::NoPrune, Variant::RandomSelect];
    let mut finals = vec![Vec::new(); variants.len()];
    let mut rhos = Vec::new();
    for seed in 0..seeds {
        let spec = SyntheticSpec {
            seed,
            ..base_spec.clone()
        };
        let plant = PlantSpec {
            seed,
            ..base_plant.clone()
        };
        let index_cfg = IndexConfig {
            seed,
            ..IndexConfig::default()
        };
        let bench = PlantedBench::prepare(&spec, &plant, &embed_cfg, &index_cfg)?;
        let inside = bench.in_region.iter().filter(|x| **x).count();
        let r = bench.testee.landscape().regions[0].radius;
        println!("seed {seed}: {inside} paragraphs in region, radius {r:.3}");
        for (v, variant) in variants.iter().enumerate() {
            if *variant == Variant::NoPrune && seeds > 3 {
                finals[v].push(f64::NAN);
                continue;
            }
            let records = bench.run(&bench_settings(*variant, seed, &embed_cfg), steps)?;
            let t_e: Vec<f64> = records.iter().map(|s| s.t_e.unwrap_or(0.0)).collect();
            let fin = records.last().and_then(|s| s.t_s).unwrap_or(0.0);
            finals[v].push(fin);
            let line: Vec<String> = t_e.iter().map(|x| format!("{x:.2}")).collect();
            let mut extra = String::new();
            if *variant == Variant::Full {
                let idx: Vec<f64> = (1..=t_e.len()).map(|x| x as f64).collect();
                let rho = spearman(&idx, &t_e).unwrap_or(f64::NAN);
                rhos.push(rho);
                let pruned: usize = records.iter().map(|s| s.pruned.len()).sum();
                let src = records.last().map_or(0, |s| s.sources_total);
                let fb: usize = records.iter().map(|s| s.fallback_count).sum();
                extra = format!(" rho={rho:.2} sources={src} pruned={pruned} fallback={fb}");
            }
            println!(
                "  {:<13} T_S={fin:.3}{extra}\n    T_E=[{}]",
                variant.as_str(),
                line.join(" ")
            );
        }
    }
    for (v, variant) in variants.iter().enumerate() {
        let mean = finals[v].iter().sum::<f64>() / finals[v].len() as f64;
        println!("mean T_S {:<13} {mean:.4}", variant.as_str());
    }
    let wins = (0..finals[0].len())
        .filter(|&i| finals[0][i] > finals[2][i])
        .count();
    let trending = rhos.iter().filter(|r| **r >= 0.5).count();
    println!(
        "full > random_select in {wins}/{seeds}; rho >= 0.5 in {trending}/{seeds}; {:.1}s",
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
