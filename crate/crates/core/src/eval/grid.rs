use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AblationConfig;
use crate::cli::{run_experiment, RunConfig, RunResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(flatten)]
    pub ablation: AblationConfig,
}

impl Variant {
    pub fn new(name: &str, hard_masking: bool, reweighting: bool, cscr: bool) -> Self {
        Self {
            name: name.into(),
            ablation: AblationConfig {
                hard_masking,
                reweighting,
                cscr,
                local_stage: true,
            },
        }
    }

    /// The mechanism combinations compared in the ablation study.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new("baseline", false, false, false),
            Self::new("ha", true, false, false),
            Self::new("re", false, true, false),
            Self::new("ha_re", true, true, false),
            Self::new("cscr", false, false, true),
            Self::new("full", true, true, true),
        ]
    }
}

/// Axes of an ablation grid. Empty axes fall back to the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub variants: Vec<Variant>,
    pub lambdas: Vec<f64>,
    pub prototypes: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub variant: String,
    pub ablation: AblationConfig,
    pub lambda: f64,
    pub prototypes: usize,
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub cell: GridCell,
    pub seed: u64,
    pub outcome: Result<RunResult, String>,
}

impl GridSpec {
    pub fn cells(&self, base: &RunConfig) -> Vec<GridCell> {
        let variants = if self.variants.is_empty() {
            vec![Variant {
                name: "base".into(),
                ablation: base.ablation,
            }]
        } else {
            self.variants.clone()
        };
        let lambdas = or_default(&self.lambdas, base.encoder.lambda);
        let protos = or_default(&self.prototypes, base.federation.prototypes);
        let mut cells = Vec::new();
        for v in &variants {
            for &lambda in &lambdas {
                for &prototypes in &protos {
                    cells.push(GridCell {
                        variant: v.name.clone(),
                        ablation: v.ablation,
                        lambda,
                        prototypes,
                    });
                }
            }
        }
        cells
    }

    pub fn seeds(&self, base: &RunConfig) -> Vec<u64> {
        or_default(&self.seeds, base.seed)
    }
}

fn or_default<T: Clone>(axis: &[T], fallback: T) -> Vec<T> {
    if axis.is_empty() {
        vec![fallback]
    } else {
        axis.to_vec()
    }
}

/// Runs every cell for every seed. A failing cell records its error and the
/// remaining cells still run.
pub fn run_ablation_grid(base: &RunConfig, spec: &GridSpec) -> Vec<GridRow> {
    let seeds = spec.seeds(base);
    let jobs: Vec<(GridCell, u64)> = spec
        .cells(base)
        .into_iter()
        .flat_map(|cell| seeds.iter().map(move |&s| (cell.clone(), s)))
        .collect();
    jobs.into_par_iter()
        .map(|(cell, seed)| {
            let mut config = base.clone();
            config.seed = seed;
            config.ablation = cell.ablation;
            config.encoder.lambda = cell.lambda;
            config.federation.prototypes = cell.prototypes;
            let outcome = run_experiment(&config)
                .map(|o| o.result)
                .map_err(|e| e.to_string());
            GridRow { cell, seed, outcome }
        })
        .collect()
}

/// Mean metrics over the successful runs sharing a key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: String,
    pub runs: usize,
    pub failures: usize,
    pub acc_base: Option<f64>,
    pub acc_novel: Option<f64>,
    pub hm: Option<f64>,
    pub domain_mean: Option<f64>,
    pub comm_volume: Option<f64>,
}

/// Groups rows by `key` (in first-seen order) and averages each metric.
pub fn summarize(rows: &[GridRow], key: impl Fn(&GridCell) -> String) -> Vec<SummaryRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<String, Vec<&GridRow>> = BTreeMap::new();
    for row in rows {
        let k = key(&row.cell);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(row);
    }
    order
        .into_iter()
        .map(|k| {
            let members = &groups[&k];
            let ok: Vec<&RunResult> = members.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let mean = |f: &dyn Fn(&RunResult) -> Option<f64>| {
                let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            SummaryRow {
                runs: ok.len(),
                failures: members.len() - ok.len(),
                acc_base: mean(&|r| r.metrics.acc_base),
                acc_novel: mean(&|r| r.metrics.acc_novel),
                hm: mean(&|r| r.metrics.hm),
                domain_mean: mean(&|r| r.metrics.domain_mean()),
                comm_volume: mean(&|r| Some(r.metrics.comm_volume)),
                key: k,
            }
        })
        .collect()
}
