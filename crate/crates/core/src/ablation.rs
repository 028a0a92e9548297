//! Module ablation grid and refining-layer sweeps.

use crate::config::{run_xe, Prepared, RunConfig};
use crate::ddr::{RefineConfig, RefineMode};
use crate::error::Result;
use crate::metrics::ScoreReport;
use crate::model::ModelConfig;
use crate::training::{evaluate_items, EvalSet};

/// One configuration of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

impl Variant {
    fn new(base: &ModelConfig, use_dmse: bool, mode: RefineMode, layers: usize) -> Self {
        let refine = if mode == RefineMode::None {
            RefineConfig::none()
        } else {
            RefineConfig {
                mode,
                layers,
                ..base.refine.clone()
            }
        };
        let name = match (use_dmse, mode) {
            (false, RefineMode::None) => "baseline".to_string(),
            (true, RefineMode::None) => "dmse".to_string(),
            (false, m) => format!("ddr-{m}"),
            (true, m) => format!("dmse+ddr-{m}"),
        };
        Self {
            name,
            model: ModelConfig {
                use_dmse,
                refine,
                ..base.clone()
            },
        }
    }
}

/// Baseline, DMSE alone, each refining mode alone, and each mode on top of
/// DMSE. Refining rows use `base.refine.layers` layers.
pub fn module_grid(base: &ModelConfig) -> Vec<Variant> {
    let layers = base.refine.layers.max(1);
    let mut rows = vec![
        Variant::new(base, false, RefineMode::None, 0),
        Variant::new(base, true, RefineMode::None, 0),
    ];
    for use_dmse in [false, true] {
        for mode in RefineMode::ALL {
            rows.push(Variant::new(base, use_dmse, mode, layers));
        }
    }
    rows
}

/// `N = 0..=6` refining layers of one mode on top of DMSE.
pub fn layer_sweep(base: &ModelConfig, mode: RefineMode) -> Vec<Variant> {
    (0..=6)
        .map(|n| {
            let mut v = Variant::new(base, true, mode, n);
            v.model.refine = RefineConfig {
                mode,
                layers: n,
                ..base.refine.clone()
            };
            v.name = format!("{mode}-{n}");
            v
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: ScoreReport,
}

pub const CSV_HEADER: &str = "name,dmse,ddr,layers,B@1,B@2,B@3,B@4,R,C";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let m = &self.variant.model;
        let ddr = if m.refine.is_passthrough() {
            "none".to_string()
        } else {
            m.refine.mode.to_string()
        };
        let layers = if m.refine.mode == RefineMode::None { 0 } else { m.refine.layers };
        format!(
            "{},{},{},{},{}",
            self.variant.name,
            u8::from(m.use_dmse),
            ddr,
            layers,
            self.report.csv_row()
        )
    }
}

/// Trains and scores one variant with the run's training settings.
pub fn run_variant(cfg: &RunConfig, prepared: &Prepared, variant: &Variant) -> Result<AblationRow> {
    let mut sub = cfg.clone();
    sub.model = variant.model.clone();
    let (ckpt, _) = run_xe(&sub, prepared)?;
    let model = ckpt.model()?;
    let set = EvalSet {
        items: &prepared.eval,
        vocab: &prepared.vocab,
        beam: cfg.eval.beam,
    };
    let (report, _) = evaluate_items(&model, &ckpt.state.store, set)?;
    Ok(AblationRow {
        variant: variant.clone(),
        report,
    })
}
