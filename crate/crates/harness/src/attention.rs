//! Language-query cross-attention maps for one scene and question.

use std::path::{Path, PathBuf};

use soba_core::model::{Modality, Soba};
use soba_core::qa::tokenize;
use soba_core::corpus::{CorpusVocab, Sample};

use crate::{write_file, HarnessError, Result};

/// One dumped attention row.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub block: usize,
    /// `H'×W'` row-major.
    pub values: Vec<f64>,
    pub grid: usize,
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

fn to_csv(values: &[f64], grid: usize) -> String {
    let mut out: String = (0..grid).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in values.chunks(grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Binary greyscale PGM, nearest-upsampled to `size×size` and scaled by the row maximum.
pub fn to_pgm(values: &[f64], grid: usize, size: usize) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    for i in 0..size {
        for j in 0..size {
            let v = values[(i * grid / size) * grid + j * grid / size];
            let g = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            out.push(g as u8);
        }
    }
    out
}

/// Writes one CSV and one PGM per cross-attention block whose queries are
/// language tokens, using the row of the first occurrence of `query`.
pub fn dump_attention(
    model: &Soba<f64>,
    vocab: &CorpusVocab,
    sample: &Sample,
    question: &str,
    query: &str,
    out_dir: &Path,
) -> Result<Vec<AttentionMap>> {
    let tokens = vocab
        .questions
        .encode(question)
        .map_err(|e| HarnessError::Usage(format!("question does not parse: {e}")))?;
    let words = tokenize(question);
    let q = words
        .iter()
        .position(|w| w.eq_ignore_ascii_case(query))
        .ok_or_else(|| HarnessError::Usage(format!("query token {query:?} is not in the question")))?;
    let (_, records, _) = model.forward(&sample.image, &tokens)?;
    let grid = model.config.grid();
    let size = sample.mask.height;
    let mut maps = Vec::new();
    for r in records.iter().filter(|r| r.stage == "bca" && r.query == Modality::Language) {
        let values = r.row(0, q).to_vec();
        let csv = out_dir.join(format!("bca_block{}.csv", r.block));
        let pgm = out_dir.join(format!("bca_block{}.pgm", r.block));
        write_file(&csv, to_csv(&values, grid))?;
        write_file(&pgm, to_pgm(&values, grid, size))?;
        maps.push(AttentionMap {
            block: r.block,
            values,
            grid,
            csv,
            pgm,
        });
    }
    Ok(maps)
}
