//! File formats: numeric CSV with precise parse diagnostics, the fit JSON
//! schema, and full-precision float formatting so round-trips are
//! byte-stable.

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use gsvb::{Family, Groups, VariationalFamilyKind, VariationalState};

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_field(path: &str, line_no: usize, col_no: usize, tok: &str) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .with_context(|| format!("{path}: line {line_no}, column {col_no}: invalid number '{tok}'"))
}

/// Data CSV: header row, first column the response, remaining columns the
/// design. Returns (X, y).
pub fn read_data_csv(path: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().with_context(|| format!("{path}: empty file"))?;
    let width = header.split(',').count();
    if width < 2 {
        bail!("{path}: header must have a response column and at least one covariate");
    }
    let mut y = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != width {
            bail!(
                "{path}: line {line_no}: expected {width} fields, got {}",
                toks.len()
            );
        }
        y.push(parse_field(path, line_no, 1, toks[0])?);
        let mut row = Vec::with_capacity(width - 1);
        for (j, tok) in toks[1..].iter().enumerate() {
            row.push(parse_field(path, line_no, j + 2, tok)?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{path}: no data rows");
    }
    let n = rows.len();
    let p = width - 1;
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    Ok((x, DVector::from_vec(y)))
}

/// Covariate-only CSV (header row, no response column).
pub fn read_x_csv(path: &str) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().with_context(|| format!("{path}: empty file"))?;
    let width = header.split(',').count();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != width {
            bail!(
                "{path}: line {line_no}: expected {width} fields, got {}",
                toks.len()
            );
        }
        let mut row = Vec::with_capacity(width);
        for (j, tok) in toks.iter().enumerate() {
            row.push(parse_field(path, line_no, j + 1, tok)?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{path}: no data rows");
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

pub fn write_data_csv(path: &str, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    let mut out = String::new();
    out.push('y');
    for j in 0..x.ncols() {
        out.push_str(&format!(",x{}", j + 1));
    }
    out.push('\n');
    for i in 0..x.nrows() {
        out.push_str(&fmt_f64(y[i]));
        for j in 0..x.ncols() {
            out.push(',');
            out.push_str(&fmt_f64(x[(i, j)]));
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {path}"))?;
    Ok(())
}

/// Truth CSV written by simulate: coordinate index, group index, true
/// coefficient.
pub fn write_truth_csv(path: &str, beta0: &DVector<f64>, groups: &Groups) -> Result<()> {
    let mut out = String::from("coord,group,beta0\n");
    for j in 0..beta0.len() {
        out.push_str(&format!("{},{},{}\n", j, groups.group_of(j), fmt_f64(beta0[j])));
    }
    std::fs::write(path, out).with_context(|| format!("writing {path}"))?;
    Ok(())
}

pub fn read_truth_csv(path: &str) -> Result<DVector<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let mut beta = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 3 {
            bail!("{path}: line {line_no}: expected 3 fields (coord,group,beta0)");
        }
        beta.push(parse_field(path, line_no, 3, toks[2])?);
    }
    if beta.is_empty() {
        bail!("{path}: no truth rows");
    }
    Ok(DVector::from_vec(beta))
}

/// Groups file: a JSON list of group sizes in column order.
pub fn read_groups_json(path: &str, p: usize) -> Result<Groups> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let sizes: Vec<usize> =
        serde_json::from_str(&text).with_context(|| format!("{path}: expected a JSON list of group sizes"))?;
    let total: usize = sizes.iter().sum();
    if total != p {
        bail!("{path}: group sizes sum to {total} but the design has {p} columns");
    }
    Ok(Groups::from_sizes(&sizes))
}

/// The on-disk fit schema.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitJson {
    pub family: String,
    pub kind: String,
    pub gamma: Vec<f64>,
    pub mu: Vec<f64>,
    /// Row-major flattened per-group covariance blocks.
    pub sigma_blocks: Vec<Vec<f64>>,
    pub tau_a: Option<f64>,
    pub tau_b: Option<f64>,
    pub jaakkola_t: Option<Vec<f64>>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub seed: u64,
}

impl FitJson {
    pub fn from_state(
        state: &VariationalState,
        family: Family,
        trace: &[f64],
        converged: bool,
        seed: u64,
    ) -> Self {
        FitJson {
            family: family.name().to_string(),
            kind: match state.kind {
                VariationalFamilyKind::Diagonal => "diagonal".to_string(),
                VariationalFamilyKind::Block => "block".to_string(),
            },
            gamma: state.gamma.iter().copied().collect(),
            mu: state.mu.iter().copied().collect(),
            sigma_blocks: state
                .sigma_blocks
                .iter()
                .map(|b| b.transpose().iter().copied().collect())
                .collect(),
            tau_a: state.tau.map(|t| t.0),
            tau_b: state.tau.map(|t| t.1),
            jaakkola_t: state.jaakkola_t.as_ref().map(|t| t.iter().copied().collect()),
            objective_trace: trace.to_vec(),
            converged,
            seed,
        }
    }

    pub fn family(&self) -> Result<Family> {
        self.family
            .parse::<Family>()
            .map_err(|e| anyhow::anyhow!(e))
    }

    pub fn groups(&self) -> Result<Groups> {
        let mut sizes = Vec::with_capacity(self.sigma_blocks.len());
        for (k, block) in self.sigma_blocks.iter().enumerate() {
            let m = (block.len() as f64).sqrt().round() as usize;
            if m * m != block.len() {
                bail!("sigma block {k} has {} entries, not a square count", block.len());
            }
            sizes.push(m);
        }
        Ok(Groups::from_sizes(&sizes))
    }

    pub fn to_state(&self) -> Result<VariationalState> {
        let groups = self.groups()?;
        if groups.p() != self.mu.len() {
            bail!(
                "fit file inconsistent: mu has {} entries but blocks cover {}",
                self.mu.len(),
                groups.p()
            );
        }
        if self.gamma.len() != groups.num_groups() {
            bail!("fit file inconsistent: gamma length vs number of blocks");
        }
        let kind = self
            .kind
            .parse::<VariationalFamilyKind>()
            .map_err(|e| anyhow::anyhow!(e))?;
        let sigma_blocks = self
            .sigma_blocks
            .iter()
            .enumerate()
            .map(|(k, flat)| {
                let m = groups.size(k);
                DMatrix::from_row_slice(m, m, flat)
            })
            .collect();
        Ok(VariationalState {
            mu: DVector::from_vec(self.mu.clone()),
            sigma_blocks,
            gamma: DVector::from_vec(self.gamma.clone()),
            tau: match (self.tau_a, self.tau_b) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            },
            jaakkola_t: self
                .jaakkola_t
                .as_ref()
                .map(|t| DVector::from_vec(t.clone())),
            kind,
        })
    }
}

pub fn write_json<T: Serialize>(path: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {path}"))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {path}"))
}
