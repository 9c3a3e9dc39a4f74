//! Grid search over regularized component, learning rate and coefficient.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use exdrop_core::encoder::EncoderParams;
use exdrop_core::reg::{Component, ValueVariant};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{GridSection, Lambda, RunConfig};
use crate::data::{load_dataset, Dataset};
use crate::error::{invalid, io_err, Result};
use crate::metrics::emit_metrics;
use crate::train::{evaluate, train_on, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellKey {
    pub component: Component,
    pub lr: f64,
    pub lambda: f64,
}

impl CellKey {
    fn file_stem(&self) -> String {
        format!("{}_lr{}_lambda{}", self.component.label(), self.lr, self.lambda)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    /// The run summary, or the reason the run failed.
    pub result: std::result::Result<RunSummary, String>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub key: CellKey,
    pub runs: Vec<SeedRun>,
    /// Best-epoch validation accuracy over the seeds that finished.
    pub val: Option<Stat>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    pub cells: Vec<CellResult>,
    /// Index into `cells` of the highest mean validation accuracy.
    pub selected: Option<usize>,
    /// Test accuracy of the selected cell, one value per finished seed.
    pub test: Option<Stat>,
}

/// The config for one cell: every coefficient zero except `key.component`,
/// which is `key.lambda` on all layers.
pub fn cell_config(base: &RunConfig, key: CellKey, seed: u64) -> RunConfig {
    let mut c = base.clone();
    for comp in Component::ALL {
        *c.reg.lambda_mut(comp) = Lambda::Shared(0.0);
    }
    *c.reg.lambda_mut(key.component) = Lambda::Shared(key.lambda);
    match key.component {
        Component::V => c.reg.value_variant = ValueVariant::TokenLevel,
        Component::Av => c.reg.value_variant = ValueVariant::AttentionConditioned,
        _ => {}
    }
    c.optimizer.set_lr(key.lr);
    c.seed = seed;
    c.grid = None;
    c
}

pub fn cells(grid: &GridSection) -> Vec<CellKey> {
    let mut out = Vec::new();
    for &component in &grid.components {
        for &lr in &grid.lrs {
            for &lambda in &grid.lambdas {
                out.push(CellKey { component, lr, lambda });
            }
        }
    }
    out
}

/// Trains every cell once per seed, concurrently, then picks the cell with
/// the best mean validation accuracy and evaluates only that cell on the test
/// split. Per-run metrics go to `out/cells/` when `out` is given.
pub fn grid_search(base: &RunConfig, grid: &GridSection, out: Option<&Path>) -> Result<GridReport> {
    let keys = cells(grid);
    if keys.is_empty() || grid.seeds.is_empty() {
        return Err(invalid("grid", "needs at least one cell and one seed"));
    }
    let mut data: BTreeMap<u64, Dataset> = BTreeMap::new();
    for &seed in &grid.seeds {
        if let std::collections::btree_map::Entry::Vacant(e) = data.entry(seed) {
            e.insert(load_dataset(&base.dataset, seed)?);
        }
    }
    let jobs: Vec<(usize, u64)> = (0..keys.len())
        .flat_map(|k| grid.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<std::result::Result<(RunSummary, EncoderParams), String>> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let config = cell_config(base, keys[k], seed);
            let outcome = train_on(&config, &data[&seed], false).map_err(|e| e.to_string())?;
            if let Some(dir) = out {
                let path = dir.join("cells").join(format!("{}_seed{seed}.csv", keys[k].file_stem()));
                emit_metrics(&outcome.rows, &path).map_err(|e| e.to_string())?;
            }
            Ok((outcome.summary(), outcome.best_params))
        })
        .collect();

    let mut cells = Vec::with_capacity(keys.len());
    let mut params: Vec<Vec<Option<EncoderParams>>> = Vec::with_capacity(keys.len());
    let mut results = results.into_iter();
    for key in keys {
        let mut runs = Vec::new();
        let mut cell_params = Vec::new();
        for &seed in &grid.seeds {
            match results.next().expect("one result per job") {
                Ok((summary, p)) => {
                    runs.push(SeedRun {
                        seed,
                        result: Ok(summary),
                    });
                    cell_params.push(Some(p));
                }
                Err(e) => {
                    runs.push(SeedRun { seed, result: Err(e) });
                    cell_params.push(None);
                }
            }
        }
        let vals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok().map(|s| s.best_val_accuracy))
            .collect();
        cells.push(CellResult {
            key,
            runs,
            val: Stat::of(&vals),
        });
        params.push(cell_params);
    }

    let mut selected: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if let Some(v) = c.val {
            if selected.is_none_or(|s| v.mean > cells[s].val.unwrap().mean) {
                selected = Some(i);
            }
        }
    }
    let test = match selected {
        Some(i) => {
            let config = cell_config(base, cells[i].key, grid.seeds[0]);
            let model = config.model_config();
            let mut accs = Vec::new();
            for (run, p) in cells[i].runs.iter().zip(&params[i]) {
                if let Some(p) = p {
                    accs.push(evaluate(&model, p, &data[&run.seed].test)?);
                }
            }
            Stat::of(&accs)
        }
        None => None,
    };
    Ok(GridReport { cells, selected, test })
}

fn pct(s: &Stat) -> String {
    format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
}

impl GridReport {
    /// Validation accuracy (%) as mean ± std, one row per component and
    /// learning rate, one column per coefficient.
    pub fn table(&self, grid: &GridSection) -> String {
        let mut out = String::from("| component | lr |");
        for l in &grid.lambdas {
            write!(out, " λ={l} |").unwrap();
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(grid.lambdas.len()));
        out.push('\n');
        let mut it = self.cells.iter();
        for c in &grid.components {
            for lr in &grid.lrs {
                write!(out, "| {} | {lr} |", c.label()).unwrap();
                for _ in &grid.lambdas {
                    let cell = it.next().expect("cells follow the grid order");
                    match &cell.val {
                        Some(s) => write!(out, " {} |", pct(s)).unwrap(),
                        None => out.push_str(" failed |"),
                    }
                }
                out.push('\n');
            }
        }
        match self.selected {
            Some(i) => {
                let c = &self.cells[i];
                write!(
                    out,
                    "\nselected: component={} lr={} λ={} val={}",
                    c.key.component.label(),
                    c.key.lr,
                    c.key.lambda,
                    pct(c.val.as_ref().unwrap())
                )
                .unwrap();
                if let Some(t) = &self.test {
                    write!(out, " test={}", pct(t)).unwrap();
                }
                out.push('\n');
            }
            None => out.push_str("\nselected: none (every cell failed)\n"),
        }
        out
    }

    /// One line per run: `component,lr,lambda,seed,status,best_epoch,best_val_acc`.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("component,lr,lambda,seed,status,best_epoch,best_val_acc\n");
        for c in &self.cells {
            for r in &c.runs {
                let k = &c.key;
                match &r.result {
                    Ok(s) => writeln!(
                        out,
                        "{},{},{},{},ok,{},{}",
                        k.component.label(),
                        k.lr,
                        k.lambda,
                        r.seed,
                        s.best_epoch,
                        s.best_val_accuracy
                    ),
                    Err(_) => writeln!(out, "{},{},{},{},failed,,", k.component.label(), k.lr, k.lambda, r.seed),
                }
                .unwrap();
            }
        }
        out
    }

    /// Writes `grid.csv`, `table.md` and `report.json` into `dir`.
    pub fn write(&self, grid: &GridSection, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in [
            ("grid.csv", self.runs_csv()),
            ("table.md", self.table(grid)),
            ("report.json", serde_json::to_string_pretty(self)? + "\n"),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}
