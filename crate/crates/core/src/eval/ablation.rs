//! The M1–M8 ablation grid: training with checkpoint caching, RD curves,
//! BD-rate against M1 and per-frame PSNR slopes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{bd_rate, RdPoint};
use super::protocol::{csv_err, frame_records, held_out_sequences, psnr_slope, rd_curve};
use super::synthetic::SequenceSpec;
use crate::codec::ModelState;
use crate::error::{contract_err, Result};
use crate::training::{load_checkpoint, save_checkpoint, TrainConfig};

/// Bumped whenever a code change invalidates cached checkpoints.
pub const MODEL_REVISION: u64 = 3;

/// Feature flags of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub pqa: bool,
    pub rqa: bool,
    pub repeat: bool,
    pub long: bool,
}

const fn row(name: &'static str, pqa: bool, rqa: bool, repeat: bool, long: bool) -> AblationRow {
    AblationRow {
        name,
        pqa,
        rqa,
        repeat,
        long,
    }
}

pub const ROWS: [AblationRow; 8] = [
    row("M1", false, false, false, false),
    row("M2", true, false, false, false),
    row("M3", true, true, false, false),
    row("M4", false, false, true, false),
    row("M5", false, false, true, true),
    row("M6", true, true, true, false),
    row("M7", true, true, false, true),
    row("M8", true, true, true, true),
];

impl AblationRow {
    pub fn by_name(name: &str) -> Result<Self> {
        ROWS.iter()
            .find(|r| r.name.eq_ignore_ascii_case(name))
            .copied()
            .map_or_else(|| contract_err(format!("unknown ablation row {name:?}")), Ok)
    }

    /// `base` with this row's flags.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            pqa: self.pqa,
            rqa: self.rqa,
            repeat: self.repeat,
            long: self.long,
            ..base.clone()
        }
    }
}

/// Rows named by `m1..m8`, `m2..m4` or a comma list such as `m1,m3,m8`.
pub fn parse_grid(spec: &str) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once("..") {
            let lo = ROWS.iter().position(|r| r.name.eq_ignore_ascii_case(a.trim()));
            let hi = ROWS.iter().position(|r| r.name.eq_ignore_ascii_case(b.trim()));
            match (lo, hi) {
                (Some(lo), Some(hi)) if lo <= hi => rows.extend_from_slice(&ROWS[lo..=hi]),
                _ => return contract_err(format!("bad row range {part:?}")),
            }
        } else {
            rows.push(AblationRow::by_name(part)?);
        }
    }
    rows.dedup();
    if rows.is_empty() {
        return contract_err("empty ablation grid");
    }
    Ok(rows)
}

/// Test protocol shared by every ablation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Sequences behind each RD point.
    pub sequences: usize,
    pub rates: Vec<f32>,
    pub intra_period: i32,
    /// Sequences coded with a single intra frame for the PSNR slope.
    pub slope_sequences: usize,
    pub slope_rate: f32,
    pub slope_from: usize,
    pub slope_to: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            width: 64,
            height: 64,
            frames: 96,
            sequences: 3,
            rates: vec![0.0, 1.0, 2.0, 3.0],
            intra_period: 32,
            slope_sequences: 5,
            slope_rate: 0.0,
            slope_from: 10,
            slope_to: 95,
            seed: 77,
        }
    }
}

impl EvalConfig {
    pub fn spec(&self) -> SequenceSpec {
        SequenceSpec::new(self.width, self.height, self.frames)
    }
}

/// Cache file for a trained configuration.
pub fn cache_path(dir: &Path, cfg: &TrainConfig, seed: u64) -> PathBuf {
    let key = cfg.digest() ^ MODEL_REVISION.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    dir.join(format!("{key:016x}-s{seed}.ckpt"))
}

/// Trains `cfg` from `seed`, or loads the cached result when present.
pub fn trained_model(cfg: &TrainConfig, seed: u64, cache: Option<&Path>) -> Result<ModelState> {
    let path = cache.map(|d| cache_path(d, cfg, seed));
    if let Some(p) = &path {
        if let Ok((model, _)) = load_checkpoint(p) {
            if model.config == cfg.model_config() {
                return Ok(model);
            }
        }
    }
    let mut log = Vec::new();
    let (trainer, _) = cfg.train(seed, Some(&mut log))?;
    if let Some(p) = &path {
        std::fs::create_dir_all(p.parent().unwrap())?;
        std::fs::write(p.with_extension("csv"), &log)?;
        std::fs::write(p.with_extension("toml"), cfg.to_toml())?;
        save_checkpoint(p, &trainer.model, Some(&trainer.opt))?;
    }
    Ok(trainer.model)
}

/// Measurements of one trained (row, seed) model.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub row: &'static str,
    pub seed: u64,
    pub curve: Vec<RdPoint>,
    /// BD-rate against M1 of the same seed; NaN when the curves cannot
    /// be compared.
    pub bd_rate: f64,
    /// PSNR slope (dB per frame) of each slope sequence.
    pub slopes: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl AblationTable {
    pub fn cell(&self, row: &str, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.row == row && c.seed == seed)
    }

    pub fn bd_rates(&self, row: &str) -> Vec<f64> {
        self.cells.iter().filter(|c| c.row == row).map(|c| c.bd_rate).collect()
    }

    pub fn median_bd_rate(&self, row: &str) -> f64 {
        median(&self.bd_rates(row))
    }

    /// `row,seed,rate,bpp,psnr` per RD point.
    pub fn write_curves(&self, out: &mut dyn Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "seed", "point", "bpp", "psnr"]).map_err(csv_err)?;
        for c in &self.cells {
            for p in &c.curve {
                w.write_record([
                    c.row.to_string(),
                    c.seed.to_string(),
                    p.label.clone(),
                    format!("{:.6}", p.bpp),
                    format!("{:.4}", p.quality),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `row,seed,bd_rate,median_slope` per cell.
    pub fn write_summary(&self, out: &mut dyn Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "seed", "bd_rate", "median_slope"]).map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                c.row.to_string(),
                c.seed.to_string(),
                format!("{:.3}", c.bd_rate),
                format!("{:.6}", median(&c.slopes)),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything the ablation runner needs.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSettings {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub cache: Option<PathBuf>,
}

/// Measures one trained model under the shared protocol.
pub fn evaluate_model(model: &ModelState, eval: &EvalConfig) -> Result<(Vec<RdPoint>, Vec<f64>)> {
    let spec = eval.spec();
    let rd_seqs = held_out_sequences(&spec, eval.sequences, eval.seed)?;
    let curve = rd_curve(model, &rd_seqs, &eval.rates, eval.intra_period)?;
    let slope_seqs = held_out_sequences(&spec, eval.slope_sequences, eval.seed.wrapping_add(1))?;
    let mut slopes = Vec::with_capacity(slope_seqs.len());
    for seq in &slope_seqs {
        let (_, records) = frame_records(model, seq, eval.slope_rate, -1)?;
        slopes.push(psnr_slope(&records, eval.slope_from, eval.slope_to)?);
    }
    Ok((curve, slopes))
}

/// Trains (or loads) and evaluates every `(row, seed)` pair; M1 is always
/// included as the anchor.
pub fn run_ablation(
    rows: &[AblationRow],
    seeds: &[u64],
    settings: &AblationSettings,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationTable> {
    let mut grid = vec![ROWS[0]];
    grid.extend(rows.iter().filter(|r| r.name != "M1"));
    let mut table = AblationTable::default();
    for &seed in seeds {
        let mut anchor: Option<Vec<RdPoint>> = None;
        for r in &grid {
            progress(&format!("{} seed {seed}: training", r.name));
            let model = trained_model(&r.config(&settings.train), seed, settings.cache.as_deref())?;
            progress(&format!("{} seed {seed}: evaluating", r.name));
            let (curve, slopes) = evaluate_model(&model, &settings.eval)?;
            let bd = match &anchor {
                None => 0.0,
                Some(a) => bd_rate(a, &curve).unwrap_or_else(|e| {
                    progress(&format!("{} seed {seed}: no BD-rate ({e})", r.name));
                    f64::NAN
                }),
            };
            if anchor.is_none() {
                anchor = Some(curve.clone());
            }
            table.cells.push(AblationCell {
                row: r.name,
                seed,
                curve,
                bd_rate: bd,
                slopes,
            });
        }
    }
    Ok(table)
}
