//! Loss-term and input/replacement ablation grids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate_reconstruction, EvalRow};
use super::sc::{model_for, Trainer};
use crate::data::TrainingSample;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PerceptualExtractor};
use crate::model::{Generator, Modality, ScModel};

type Metric = (&'static str, fn(&EvalRow) -> f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTable {
    /// Objective terms omitted in turn.
    Terms,
    /// Input modality and replacement resolution.
    Inputs,
}

impl AblationTable {
    pub fn name(self) -> &'static str {
        match self {
            AblationTable::Terms => "terms",
            AblationTable::Inputs => "inputs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub name: String,
    pub table: AblationTable,
    #[serde(default)]
    pub weights: Option<LossWeights>,
    #[serde(default)]
    pub modality: Option<Modality>,
    #[serde(default)]
    pub replacement_res: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default)]
    pub base: TrainConfig,
    pub rows: Vec<AblationSpec>,
}

fn without(f: impl Fn(&mut LossWeights)) -> Option<LossWeights> {
    let mut w = LossWeights::default();
    f(&mut w);
    Some(w)
}

impl AblationGrid {
    pub fn from_toml(s: &str) -> Result<Self> {
        let g: Self = toml::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("ablation grid has no rows".into()));
        }
        for r in &self.rows {
            self.config_for(r)?;
        }
        Ok(())
    }

    /// Both tables: six objective configurations, then mask / sketch / both
    /// at r and both at r/2 and 2r.
    pub fn standard_layout(base: TrainConfig, replacement_res: usize) -> Self {
        let spec = |name: &str, table, weights, modality, replacement_res| AblationSpec {
            name: name.to_string(),
            table,
            weights,
            modality,
            replacement_res,
        };
        use AblationTable::*;
        let r = replacement_res;
        let rows = vec![
            spec("No L1", Terms, without(|w| w.lambda_l1 = 0.0), None, None),
            spec(
                "No Pcpt",
                Terms,
                without(|w| {
                    w.lambda_gp = 0.0;
                    w.lambda_lp = 0.0
                }),
                None,
                None,
            ),
            spec("No LP", Terms, without(|w| w.lambda_lp = 0.0), None, None),
            spec("No GP", Terms, without(|w| w.lambda_gp = 0.0), None, None),
            spec("No FM", Terms, without(|w| w.lambda_fm = 0.0), None, None),
            spec("Full", Terms, Some(LossWeights::default()), None, None),
            spec("Mask", Inputs, None, Some(Modality::Mask), Some(r)),
            spec("Sketch", Inputs, None, Some(Modality::Sketch), Some(r)),
            spec(&format!("Both({r}x{r})"), Inputs, None, Some(Modality::Both), Some(r)),
            spec(&format!("{}x{}", r / 2, r / 2), Inputs, None, Some(Modality::Both), Some(r / 2)),
            spec(&format!("{}x{}", 2 * r, 2 * r), Inputs, None, Some(Modality::Both), Some(2 * r)),
        ];
        Self { base, rows }
    }

    /// Keeps only rows whose name is listed.
    pub fn select(mut self, names: &[&str]) -> Self {
        self.rows.retain(|r| names.contains(&r.name.as_str()));
        self
    }

    pub fn config_for(&self, spec: &AblationSpec) -> Result<TrainConfig> {
        let mut c = self.base.clone();
        if let Some(w) = spec.weights {
            c.weights = w;
        }
        if let Some(m) = spec.modality {
            c.modality = m;
        }
        if let Some(r) = spec.replacement_res {
            c.replacement_res = Some(r);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub table: AblationTable,
    pub row: EvalRow,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub results: Vec<AblationResult>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&EvalRow> {
        self.results.iter().map(|r| &r.row).find(|r| r.config == name)
    }

    /// One block per table, metrics as rows and configurations as columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for table in [AblationTable::Terms, AblationTable::Inputs] {
            let rows: Vec<&EvalRow> = self.results.iter().filter(|r| r.table == table).map(|r| &r.row).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = write!(s, "table={},Config", table.name());
            for r in &rows {
                let _ = write!(s, ",{}", r.config);
            }
            s.push('\n');
            let metrics: [Metric; 6] = [
                ("L1", |r| r.l1),
                ("Local", |r| r.local),
                ("Global", |r| r.global),
                ("desk-FID", |r| r.desk_fid),
                ("SSIM", |r| r.ssim),
                ("PSNR", |r| r.psnr),
            ];
            for (m, f) in metrics {
                let _ = write!(s, "table={},{m}", table.name());
                for r in &rows {
                    let _ = write!(s, ",{:.6}", f(r));
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains one model per row from the same generator, data and seed, and
/// evaluates each on `test`. `on_trained` sees every finished model.
pub fn run_ablation_grid(
    grid: &AblationGrid,
    generator: &Generator,
    train: &[TrainingSample],
    test: &[&TrainingSample],
    extractor: &PerceptualExtractor,
    mut on_trained: impl FnMut(&AblationSpec, &ScModel) -> Result<()>,
) -> Result<AblationReport> {
    grid.validate()?;
    let mut report = AblationReport::default();
    for spec in &grid.rows {
        let cfg = grid.config_for(spec)?;
        let model = model_for(generator, &cfg)?;
        let loss = cfg.loss_config(model.generator_config())?;
        let mut trainer = Trainer::new(model, cfg.clone(), train.to_vec(), extractor.clone())?;
        trainer.run(cfg.steps, |_, _| Ok(true))?;
        on_trained(spec, &trainer.model)?;
        let row = evaluate_reconstruction(&spec.name, &trainer.model, test, &loss, extractor)?;
        report.results.push(AblationResult { table: spec.table, row });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_layout_has_both_tables() {
        let g = AblationGrid::standard_layout(TrainConfig::default(), 8);
        let names: Vec<&str> = g.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            ["No L1", "No Pcpt", "No LP", "No GP", "No FM", "Full", "Mask", "Sketch", "Both(8x8)", "4x4", "16x16"]
        );
        g.validate().unwrap();
        let np = g.config_for(&g.rows[1]).unwrap();
        assert_eq!((np.weights.lambda_gp, np.weights.lambda_lp), (0.0, 0.0));
        assert_eq!(g.config_for(&g.rows[9]).unwrap().replacement_res, Some(4));
    }

    #[test]
    fn grid_toml_round_trip() {
        let g = AblationGrid::standard_layout(TrainConfig { steps: 3, ..Default::default() }, 8).select(&["Mask", "Both(8x8)"]);
        let s = toml::to_string(&g).unwrap();
        assert_eq!(AblationGrid::from_toml(&s).unwrap(), g);
        assert!(AblationGrid::from_toml("rows = []").is_err());
    }

    #[test]
    fn csv_mirrors_table_layout() {
        let row = |n: &str| EvalRow {
            config: n.into(),
            l1: 0.1,
            local: 0.2,
            global: 0.3,
            desk_fid: 4.0,
            ssim: 0.5,
            psnr: 20.0,
        };
        let rep = AblationReport {
            results: vec![AblationResult {
                table: AblationTable::Inputs,
                row: row("Mask"),
            }],
        };
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "table=inputs,Config,Mask");
        assert_eq!(lines[1], "table=inputs,L1,0.100000");
        assert_eq!(lines.len(), 7);
    }
}
