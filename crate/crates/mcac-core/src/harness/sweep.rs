//! Sensitivity sweeps: run the training loop across a one-dimensional grid
//! (demo quality, demo quantity, pretraining on/off, or target family),
//! several seeds per cell, and aggregate final smoothed returns.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use crate::targets::TargetFamily;

use super::{train, DemoSource, HarnessError, RunConfig, TrainSummary};

#[derive(Debug, Clone, PartialEq)]
pub enum SweepKind {
    DemoQuality(Vec<f64>),
    DemoQuantity(Vec<usize>),
    PretrainOnOff,
    TargetFamily(Vec<TargetFamily>),
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    /// Final smoothed return per seed; `None` marks a failed run.
    pub per_seed: Vec<(u64, Option<f64>)>,
    pub mean_final_return: Option<f64>,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,seed,final_smoothed_return\n");
        for cell in &self.cells {
            for (seed, value) in &cell.per_seed {
                out.push_str(&format!(
                    "{},{},{}\n",
                    cell.label,
                    seed,
                    value.map(|v| format!("{v:.16e}")).unwrap_or_default()
                ));
            }
        }
        out.push_str("\ncell,mean_final_return,std_error\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{}\n",
                cell.label,
                cell.mean_final_return
                    .map(|v| format!("{v:.16e}"))
                    .unwrap_or_default(),
                cell.std_error
                    .map(|v| format!("{v:.16e}"))
                    .unwrap_or_default(),
            ));
        }
        out
    }
}

fn cell_configs(kind: &SweepKind, base: &RunConfig) -> Result<Vec<(String, RunConfig)>, HarnessError> {
    let mut cells = Vec::new();
    match kind {
        SweepKind::DemoQuality(epsilons) => {
            for &epsilon in epsilons {
                let mut cfg = base.clone();
                let n = match &base.demo_source {
                    DemoSource::Generate { n, .. } => *n,
                    DemoSource::File { .. } => {
                        return Err(HarnessError::Config(
                            "demo quality sweep needs a generated demo source".into(),
                        ))
                    }
                };
                cfg.demo_source = DemoSource::Generate { n, epsilon };
                cells.push((format!("epsilon_{epsilon}"), cfg));
            }
        }
        SweepKind::DemoQuantity(counts) => {
            for &n in counts {
                let mut cfg = base.clone();
                let epsilon = match &base.demo_source {
                    DemoSource::Generate { epsilon, .. } => *epsilon,
                    DemoSource::File { .. } => {
                        return Err(HarnessError::Config(
                            "demo quantity sweep needs a generated demo source".into(),
                        ))
                    }
                };
                cfg.demo_source = DemoSource::Generate { n, epsilon };
                cells.push((format!("demos_{n}"), cfg));
            }
        }
        SweepKind::PretrainOnOff => {
            let mut on = base.clone();
            on.agent.pretrain_steps = base.agent.pretrain_steps.max(1);
            cells.push((format!("pretrain_{}", on.agent.pretrain_steps), on));
            let mut off = base.clone();
            off.agent.pretrain_steps = 0;
            cells.push(("pretrain_0".to_string(), off));
        }
        SweepKind::TargetFamily(families) => {
            for &family in families {
                let mut cfg = base.clone();
                cfg.agent.target.family = family;
                cfg.agent.mcac = family.uses_mcac_max();
                cfg.agent.algorithm = if family.uses_gqe() {
                    crate::agents::Algorithm::Gqe
                } else {
                    crate::agents::Algorithm::Sac
                };
                cells.push((format!("{family:?}").to_lowercase(), cfg));
            }
        }
    }
    if cells.is_empty() {
        return Err(HarnessError::Config("sweep grid is empty".into()));
    }
    Ok(cells)
}

/// Runs `train` for every (cell, seed) pair, optionally in parallel
/// worker threads (each run is fully isolated and internally sequential).
/// Failed cells are recorded and the sweep continues.
pub fn sweep(
    kind: &SweepKind,
    base: &RunConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<SweepSummary, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one seed".into()));
    }
    let cells = cell_configs(kind, base)?;

    struct Work {
        cell: usize,
        label: String,
        cfg: RunConfig,
    }
    let mut queue: VecDeque<Work> = VecDeque::new();
    for (cell, (label, cfg)) in cells.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            cfg.output_dir = out_dir.map(|d| d.join(label).join(format!("seed_{seed}")));
            queue.push_back(Work {
                cell,
                label: label.clone(),
                cfg,
            });
        }
    }

    type CellResult = (usize, u64, Result<TrainSummary, HarnessError>);
    let queue = Mutex::new(queue);
    let results: Mutex<Vec<CellResult>> = Mutex::new(Vec::new());
    let workers = jobs.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let work = {
                    let mut q = queue.lock().expect("queue lock");
                    match q.pop_front() {
                        Some(w) => w,
                        None => break,
                    }
                };
                let seed = work.cfg.seed;
                let outcome = train(&work.cfg);
                if let Err(e) = &outcome {
                    log::warn!("sweep cell {} seed {} failed: {e}", work.label, seed);
                }
                results
                    .lock()
                    .expect("results lock")
                    .push((work.cell, seed, outcome));
            });
        }
    });

    let results = results.into_inner().expect("results");
    let mut out_cells: Vec<SweepCell> = cells
        .iter()
        .map(|(label, _)| SweepCell {
            label: label.clone(),
            per_seed: Vec::new(),
            mean_final_return: None,
            std_error: None,
        })
        .collect();
    for (cell, seed, outcome) in results {
        let value = outcome.ok().and_then(|s| s.final_smoothed_return);
        out_cells[cell].per_seed.push((seed, value));
    }
    for cell in &mut out_cells {
        cell.per_seed.sort_by_key(|(seed, _)| *seed);
        let ok: Vec<f64> = cell.per_seed.iter().filter_map(|(_, v)| *v).collect();
        if !ok.is_empty() {
            let mean = ok.iter().sum::<f64>() / ok.len() as f64;
            cell.mean_final_return = Some(mean);
            if ok.len() > 1 {
                let var = ok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (ok.len() - 1) as f64;
                cell.std_error = Some((var / ok.len() as f64).sqrt());
            }
        }
    }

    let summary = SweepSummary { cells: out_cells };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep_summary.csv"), summary.to_csv())?;
    }
    Ok(summary)
}
