//! Experiment driver: pretraining, paired GRPO/ViPO fine-tuning under the
//! redness reward, the allocation-map ablation grid, and image dumps.
//!
//! Every run starts from the same pretrained model and is evaluated on a
//! fixed set of deterministic (noise-free) samples, so milestone images and
//! scores are reproducible from the configuration and seed alone.

mod config;
mod images;

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow_model::{
    load_checkpoint, pretrain_flow, render_dataset, save_checkpoint, DatasetConfig, PretrainReport, VelocityField,
    IMAGE_CHANNELS,
};
use crate::numerics::{RngStream, Tensor};
use crate::psm::{build_allocation_map, component_maps, Aggregation, FeatureSource, PsmConfig};
use crate::rewards::{class_template_reward, redness};
use crate::sde_sampler::{ode_sample, SamplerConfig};
use crate::trainer::{
    first_update_cross_check, train_with_observer, Algorithm, GradientCrossCheck, MapTarget, MetricsLog, TrainConfig,
};

pub use config::{AblationConfig, EvalConfig, ExperimentConfig};
pub use images::{encode_pgm, encode_ppm, grid_layout, tile_images, tile_maps, upsample_nearest, write_pgm, write_ppm};

/// Optional extra artifacts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DumpOptions {
    pub maps: bool,
    pub components: bool,
}

/// Pretrain a fresh model on the synthetic dataset.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<(VelocityField, PretrainReport)> {
    let data = render_dataset(&cfg.data, &mut RngStream::new(cfg.data_seed))?;
    let mut model = VelocityField::new(cfg.arch, &mut RngStream::new(cfg.model_seed))?;
    let report = pretrain_flow(&mut model, &data, &cfg.pretrain, &mut RngStream::new(cfg.pretrain_seed))?;
    Ok((model, report))
}

/// Load the configured checkpoint and check it matches the configuration.
pub fn load_pretrained(cfg: &ExperimentConfig) -> Result<VelocityField> {
    let model = load_checkpoint(&cfg.checkpoint)?;
    if model.arch() != &cfg.arch {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint architecture {:?} differs from configured {:?}",
            model.arch(),
            cfg.arch
        )));
    }
    Ok(model)
}

/// Fixed evaluation inputs: one noise tensor and class per sample.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub noise: Vec<Tensor>,
    pub classes: Vec<usize>,
}

impl EvalSet {
    /// Sample `i` uses class `i mod C` and noise from stream `[i]` of the eval seed.
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let base = RngStream::new(cfg.eval.eval_seed);
        let shape = [IMAGE_CHANNELS, cfg.data.side, cfg.data.side];
        let n = cfg.eval.eval_samples;
        Self {
            noise: (0..n).map(|i| base.derive(&[i as u64]).normal_tensor(&shape)).collect(),
            classes: (0..n).map(|i| i % cfg.data.num_classes()).collect(),
        }
    }
}

/// Evaluation samples and their scores at one point of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub update: usize,
    /// Clamped `3×H×W` samples.
    pub samples: Vec<Tensor>,
    pub redness: f64,
    /// Mean class-template reward against each sample's own class.
    pub structure: f64,
}

/// Deterministic samples from `model` over the sampler's time grid.
pub fn evaluate(
    model: &VelocityField,
    set: &EvalSet,
    sampler: &SamplerConfig,
    data: &DatasetConfig,
    update: usize,
) -> Result<Snapshot> {
    let ode = SamplerConfig {
        eta: 0.0,
        ..sampler.clone()
    };
    let mut samples = Vec::with_capacity(set.noise.len());
    let (mut red, mut structure) = (0.0, 0.0);
    for (noise, &class) in set.noise.iter().zip(&set.classes) {
        let states = ode_sample(model, class, noise, &ode)?;
        let img = states.last().expect("ode path has states").map(|v| v.clamp(0.0, 1.0));
        red += redness(&img)?;
        structure += class_template_reward(&img, class, data)?;
        samples.push(img);
    }
    let n = samples.len() as f64;
    Ok(Snapshot {
        update,
        samples,
        redness: red / n,
        structure: structure / n,
    })
}

/// Write a snapshot's sample grid and, on request, maps and component maps.
pub fn dump_artifacts(dir: &Path, snap: &Snapshot, psm: &PsmConfig, dump: DumpOptions) -> Result<()> {
    let tag = format!("u{:04}", snap.update);
    write_ppm(&dir.join(format!("samples_{tag}.ppm")), &tile_images(&snap.samples)?)?;
    if dump.maps {
        let maps = snap
            .samples
            .iter()
            .map(|s| build_allocation_map(s, psm, FeatureSource::Toy).map(|m| m.weights))
            .collect::<Result<Vec<_>>>()?;
        write_pgm(&dir.join(format!("maps_{tag}.pgm")), &tile_maps(&maps)?)?;
    }
    if dump.components {
        for (i, s) in snap.samples.iter().enumerate() {
            match component_maps(s, psm) {
                Ok(comps) => {
                    for (j, c) in comps.iter().enumerate() {
                        let path = dir.join("components").join(format!("{tag}_s{i:02}_c{}.pgm", j + 1));
                        write_pgm(&path, &upsample_nearest(c, psm.patch)?)?;
                    }
                }
                Err(Error::DegenerateFeatures(v)) => {
                    log::warn!("sample {i} at {tag}: no components to dump ({v:.3e})");
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

/// One fine-tuning run and its evaluations.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub metrics: MetricsLog,
    pub snapshots: Vec<Snapshot>,
    pub runtime_s: f64,
    pub model: VelocityField,
}

impl RunResult {
    /// Mean rollout reward of the first update, i.e. of the starting model.
    pub fn baseline_reward(&self) -> f64 {
        self.metrics.rows().first().map_or(f64::NAN, |r| r.mean_reward)
    }

    pub fn smoothed_reward(&self, window: usize) -> f64 {
        self.metrics.trailing_mean_reward(window).unwrap_or(f64::NAN)
    }

    pub fn snapshot(&self, update: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.update == update)
    }
}

/// Fine-tune a copy of `pretrained`, evaluating at `milestones`.
///
/// With `dir` set, writes `metrics.csv`, the final checkpoint, and milestone
/// artifacts there.
pub fn run_training(
    pretrained: &VelocityField,
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    seed: u64,
    label: &str,
    dir: Option<&Path>,
    dump: DumpOptions,
) -> Result<RunResult> {
    let started = Instant::now();
    let mut model = pretrained.clone();
    let set = EvalSet::new(cfg);
    let mut train = train.clone();
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        if train.checkpoint_every > 0 {
            train.checkpoint_dir = Some(d.join("checkpoints"));
        }
    }
    let mut snapshots = Vec::new();
    let report = train_with_observer(&mut model, &train, &cfg.data, &RngStream::new(seed), |u, m| {
        if cfg.eval.milestones.contains(&u) {
            let snap = evaluate(m, &set, &train.sampler, &cfg.data, u)?;
            if let Some(d) = dir {
                dump_artifacts(d, &snap, &train.psm, dump)?;
            }
            snapshots.push(snap);
        }
        Ok(())
    })?;
    if let Some(d) = dir {
        report
            .metrics
            .write_csv(std::fs::File::create(d.join("metrics.csv"))?)?;
        save_checkpoint(&model, &d.join("model.vipc"))?;
    }
    Ok(RunResult {
        label: label.to_string(),
        seed,
        metrics: report.metrics,
        snapshots,
        runtime_s: started.elapsed().as_secs_f64(),
        model,
    })
}

/// Paired GRPO/ViPO comparison for one seed.
#[derive(Clone, Debug)]
pub struct SeedComparison {
    pub seed: u64,
    pub grpo: RunResult,
    pub vipo: RunResult,
    /// Redness of the pretrained evaluation samples.
    pub eval_baseline: f64,
    pub threshold: f64,
    /// First milestone where both runs' evaluation redness reaches `threshold`.
    pub matched_update: usize,
    /// No milestone crossed for both; `matched_update` is the last milestone.
    pub matched_fallback: bool,
    pub grpo_structure: f64,
    pub vipo_structure: f64,
}

impl SeedComparison {
    pub fn vipo_preserves_structure(&self) -> bool {
        self.vipo_structure >= self.grpo_structure
    }
}

#[derive(Clone, Debug)]
pub struct RednessSummary {
    pub seeds: Vec<SeedComparison>,
    pub smoothing_window: usize,
}

pub const REDNESS_SUMMARY_COLUMNS: [&str; 10] = [
    "seed",
    "algorithm",
    "baseline_reward",
    "smoothed_reward",
    "gain",
    "matched_update",
    "matched_fallback",
    "redness_at_match",
    "structure_at_match",
    "runtime_s",
];

impl RednessSummary {
    /// Seeds where ViPO's structure score at the matched milestone is at least GRPO's.
    pub fn vipo_wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.vipo_preserves_structure()).count()
    }

    pub fn min_gain(&self) -> f64 {
        self.seeds
            .iter()
            .flat_map(|s| [&s.grpo, &s.vipo])
            .map(|r| r.smoothed_reward(self.smoothing_window) - r.baseline_reward())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Config(format!("summary csv: {e}"));
        w.write_record(REDNESS_SUMMARY_COLUMNS).map_err(err)?;
        for s in &self.seeds {
            for (run, structure) in [(&s.grpo, s.grpo_structure), (&s.vipo, s.vipo_structure)] {
                let smoothed = run.smoothed_reward(self.smoothing_window);
                let at = run.snapshot(s.matched_update).map_or(f64::NAN, |x| x.redness);
                w.write_record(&[
                    s.seed.to_string(),
                    run.label.clone(),
                    format!("{:.6}", run.baseline_reward()),
                    format!("{smoothed:.6}"),
                    format!("{:.6}", smoothed - run.baseline_reward()),
                    s.matched_update.to_string(),
                    s.matched_fallback.to_string(),
                    format!("{at:.6}"),
                    format!("{structure:.6}"),
                    format!("{:.2}", run.runtime_s),
                ])
                .map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn match_milestone(grpo: &RunResult, vipo: &RunResult, threshold: f64) -> (usize, bool) {
    let common: Vec<usize> = grpo
        .snapshots
        .iter()
        .map(|s| s.update)
        .filter(|u| vipo.snapshot(*u).is_some())
        .collect();
    let crossed = common.iter().copied().find(|&u| {
        grpo.snapshot(u).is_some_and(|s| s.redness >= threshold)
            && vipo.snapshot(u).is_some_and(|s| s.redness >= threshold)
    });
    match crossed {
        Some(u) => (u, false),
        None => (common.last().copied().unwrap_or(0), true),
    }
}

/// Fine-tune with GRPO and ViPO from the same model for every configured seed.
pub fn run_redness_experiment(
    pretrained: &VelocityField,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    dump: DumpOptions,
) -> Result<RednessSummary> {
    let mut seeds = Vec::with_capacity(cfg.eval.seeds.len());
    for &seed in &cfg.eval.seeds {
        let mut runs = Vec::with_capacity(2);
        for algorithm in [Algorithm::Grpo, Algorithm::Vipo] {
            let train = TrainConfig {
                algorithm,
                ..cfg.train.clone()
            };
            let label = algorithm.to_string();
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("seed{seed}")).join(&label));
            let run = run_training(pretrained, cfg, &train, seed, &label, dir.as_deref(), dump)?;
            log::info!(
                "seed {seed} {label}: reward {:.4} → {:.4} in {:.1}s",
                run.baseline_reward(),
                run.smoothed_reward(cfg.eval.smoothing_window),
                run.runtime_s
            );
            runs.push(run);
        }
        let vipo = runs.pop().expect("two runs");
        let grpo = runs.pop().expect("two runs");
        let eval_baseline = grpo.snapshots.first().map_or(f64::NAN, |s| s.redness);
        let threshold = eval_baseline + cfg.eval.crossing_delta;
        let (matched_update, matched_fallback) = match_milestone(&grpo, &vipo, threshold);
        let structure = |r: &RunResult| r.snapshot(matched_update).map_or(f64::NAN, |s| s.structure);
        seeds.push(SeedComparison {
            seed,
            eval_baseline,
            threshold,
            matched_update,
            matched_fallback,
            grpo_structure: structure(&grpo),
            vipo_structure: structure(&vipo),
            grpo,
            vipo,
        });
    }
    let summary = RednessSummary {
        seeds,
        smoothing_window: cfg.eval.smoothing_window,
    };
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        summary.write_csv(std::fs::File::create(o.join("summary.csv"))?)?;
    }
    Ok(summary)
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    /// Which sweep the cell belongs to: `reference`, `map_target`, `k` or `sigma`.
    pub family: &'static str,
    pub algorithm: Algorithm,
    pub map_target: MapTarget,
    pub psm: PsmConfig,
}

impl AblationCell {
    pub fn variant(&self) -> String {
        match self.algorithm {
            Algorithm::Grpo => "grpo".into(),
            Algorithm::Vipo => format!(
                "vipo/{}/{}/k{}/sigma_{}",
                self.map_target,
                self.psm.aggregation,
                self.psm.k,
                self.sigma_label()
            ),
        }
    }

    pub fn sigma_label(&self) -> String {
        if self.psm.smoothing_enabled {
            format!("{}", self.psm.sigma)
        } else {
            "off".into()
        }
    }

    fn train_config(&self, base: &TrainConfig, updates: usize) -> TrainConfig {
        TrainConfig {
            algorithm: self.algorithm,
            map_target: self.map_target,
            psm: self.psm.clone(),
            total_updates: updates,
            ..base.clone()
        }
    }
}

/// GRPO reference, map target × aggregation, then the K and σ sweeps.
pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<AblationCell> {
    let base = cfg.train.psm.clone();
    let mut cells = vec![AblationCell {
        family: "reference",
        algorithm: Algorithm::Grpo,
        map_target: MapTarget::Uniform,
        psm: base.clone(),
    }];
    for map_target in [MapTarget::Uniform, MapTarget::Reward, MapTarget::Advantage] {
        for aggregation in [Aggregation::Average, Aggregation::VarianceWeighted] {
            cells.push(AblationCell {
                family: "map_target",
                algorithm: Algorithm::Vipo,
                map_target,
                psm: PsmConfig {
                    aggregation,
                    ..base.clone()
                },
            });
        }
    }
    for &k in &cfg.ablation.k_values {
        cells.push(AblationCell {
            family: "k",
            algorithm: Algorithm::Vipo,
            map_target: MapTarget::Advantage,
            psm: PsmConfig { k, ..base.clone() },
        });
    }
    for &sigma in &cfg.ablation.sigmas {
        cells.push(AblationCell {
            family: "sigma",
            algorithm: Algorithm::Vipo,
            map_target: MapTarget::Advantage,
            psm: cfg.psm_variant(base.k, sigma),
        });
    }
    cells
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub final_reward: f64,
    pub structure: f64,
    pub runtime_s: f64,
    pub updates: usize,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub cross_check: GradientCrossCheck,
}

pub const ABLATION_COLUMNS: [&str; 10] = [
    "variant",
    "family",
    "algorithm",
    "map_target",
    "aggregation",
    "k",
    "sigma",
    "final_reward",
    "structure_score",
    "runtime_s",
];

impl AblationReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Config(format!("ablation csv: {e}"));
        w.write_record(ABLATION_COLUMNS).map_err(err)?;
        for r in &self.rows {
            let c = &r.cell;
            w.write_record(&[
                c.variant(),
                c.family.to_string(),
                c.algorithm.to_string(),
                c.map_target.to_string(),
                c.psm.aggregation.to_string(),
                c.psm.k.to_string(),
                c.sigma_label(),
                format!("{:.6}", r.final_reward),
                format!("{:.6}", r.structure),
                format!("{:.2}", r.runtime_s),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run every ablation cell for `cfg.ablation.updates` updates on one seed.
///
/// Cells with identical training configurations share one run.
pub fn run_ablation_grid(
    pretrained: &VelocityField,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    dump: DumpOptions,
) -> Result<AblationReport> {
    let seed = cfg.ablation.seed;
    let updates = cfg.ablation.updates;
    let cross_check = first_update_cross_check(pretrained, &cfg.train, &cfg.data, &RngStream::new(seed))?;
    let eval_cfg = ExperimentConfig {
        eval: EvalConfig {
            milestones: vec![updates],
            ..cfg.eval.clone()
        },
        ..cfg.clone()
    };
    let window = cfg.eval.smoothing_window.min(updates.max(1));
    let mut done: Vec<(TrainConfig, AblationRow)> = Vec::new();
    let mut rows = Vec::new();
    for cell in ablation_cells(cfg) {
        let train = cell.train_config(&cfg.train, updates);
        let key = |t: &TrainConfig| TrainConfig {
            map_target: if t.algorithm == Algorithm::Grpo {
                MapTarget::Uniform
            } else {
                t.map_target
            },
            psm: if t.algorithm == Algorithm::Grpo {
                PsmConfig::default()
            } else {
                t.psm.clone()
            },
            ..t.clone()
        };
        if let Some((_, row)) = done.iter().find(|(t, _)| key(t) == key(&train)) {
            rows.push(AblationRow { cell, ..row.clone() });
            continue;
        }
        let dir = out.map(|o| o.join(cell.variant().replace('/', "_")));
        let run = run_training(
            pretrained,
            &eval_cfg,
            &train,
            seed,
            &cell.variant(),
            dir.as_deref(),
            dump,
        )?;
        let row = AblationRow {
            final_reward: run.smoothed_reward(window),
            structure: run.snapshot(updates).map_or(f64::NAN, |s| s.structure),
            runtime_s: run.runtime_s,
            updates: run.metrics.len(),
            cell,
        };
        log::info!(
            "{}: reward {:.4}, structure {:.4}",
            row.cell.variant(),
            row.final_reward,
            row.structure
        );
        done.push((train, row.clone()));
        rows.push(row);
    }
    let report = AblationReport { rows, cross_check };
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        report.write_csv(std::fs::File::create(o.join("ablation.csv"))?)?;
        std::fs::write(
            o.join("gradient_check.txt"),
            format!(
                "positions {}\nmax_rel_err {:.3e}\n",
                report.cross_check.positions,
                report.cross_check.max_rel_err()
            ),
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml_str(
            r#"
            data.per_class = 2
            model.hidden = 4
            model.layers = 2
            pretrain.steps = 5
            pretrain.batch = 2
            sampler.steps = 2
            train.group_size = 2
            train.groups_per_update = 1
            train.updates = 2
            train.lr = 1e-3
            experiment.seeds = [0]
            experiment.milestones = [0, 2]
            experiment.eval_samples = 3
            ablation.updates = 1
            ablation.k_values = [1, 2]
            ablation.sigmas = ["off", 1.0]
            "#,
        )
        .unwrap();
        c.eval.smoothing_window = 2;
        c
    }

    #[test]
    fn milestone_zero_reproduces_pretrained_samples() {
        let cfg = tiny();
        let (model, _) = pretrain_model(&cfg).unwrap();
        let set = EvalSet::new(&cfg);
        let direct = evaluate(&model, &set, &cfg.train.sampler, &cfg.data, 0).unwrap();
        let run = run_training(&model, &cfg, &cfg.train, 0, "vipo", None, DumpOptions::default()).unwrap();
        assert_eq!(run.snapshots[0], direct);
        assert_eq!(run.snapshots.len(), 2);
        assert_eq!(run.metrics.len(), 2);
    }

    #[test]
    fn grid_has_expected_cells() {
        let mut cfg = tiny();
        cfg.ablation = AblationConfig::default();
        let cells = ablation_cells(&cfg);
        assert_eq!(cells.len(), 1 + 6 + 5 + 5);
        assert_eq!(cells.iter().filter(|c| c.family == "map_target").count(), 6);
        let ks: Vec<usize> = cells.iter().filter(|c| c.family == "k").map(|c| c.psm.k).collect();
        assert_eq!(ks, vec![1, 2, 3, 4, 5]);
        let sigmas: Vec<String> = cells
            .iter()
            .filter(|c| c.family == "sigma")
            .map(|c| c.sigma_label())
            .collect();
        assert_eq!(sigmas, vec!["off", "0.5", "1", "1.5", "2"]);
    }

    #[test]
    fn matched_milestone_fallback() {
        let cfg = tiny();
        let (model, _) = pretrain_model(&cfg).unwrap();
        let out = run_redness_experiment(&model, &cfg, None, DumpOptions::default()).unwrap();
        let s = &out.seeds[0];
        let (u, fallback) = match_milestone(&s.grpo, &s.vipo, f64::INFINITY);
        assert_eq!((u, fallback), (2, true));
        let (u, fallback) = match_milestone(&s.grpo, &s.vipo, f64::NEG_INFINITY);
        assert_eq!((u, fallback), (0, false));
    }
}
