//! Parameter-free fusion of per-stage tokens into one shot token, and of
//! shot tokens into prompt rows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::linalg::Mat;
use crate::mstb::TextualizedStageToken;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Max,
    Average,
    Addition,
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::Max, Self::Average, Self::Addition, Self::Concat];

    pub fn name(self) -> &'static str {
        match self {
            Self::Max => "max",
            Self::Average => "average",
            Self::Addition => "addition",
            Self::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = VistexError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| VistexError::InvalidConfig(format!("unknown fusion mode {s:?}")))
    }
}

/// One support exemplar's token rows (`~P_S`).
#[derive(Clone, Debug, PartialEq)]
pub struct TextualizedToken {
    pub rows: Mat,
    pub support_id: usize,
    pub class_id: usize,
}

/// For every output entry, which input rows it was computed from and with
/// what weight; used to route gradients back.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionRoute {
    /// `out[r][c] = in[src[r][c]][c]`.
    Select(Vec<Vec<usize>>),
    /// `out[0] = w · Σ in`.
    Scaled(f64),
    /// Output row `r` is input row `r`.
    Stack,
}

impl FusionRoute {
    /// Gradients w.r.t. `n_in` input rows given `d_out`.
    pub fn backward(&self, d_out: &Mat, n_in: usize) -> Vec<Vec<f64>> {
        let width = d_out.cols;
        let mut d_in = vec![vec![0.0; width]; n_in];
        match self {
            Self::Select(src) => {
                for (r, srow) in src.iter().enumerate() {
                    for (c, &i) in srow.iter().enumerate() {
                        d_in[i][c] += d_out.at(r, c);
                    }
                }
            }
            Self::Scaled(w) => {
                for d in d_in.iter_mut() {
                    for (o, g) in d.iter_mut().zip(d_out.row(0)) {
                        *o = w * g;
                    }
                }
            }
            Self::Stack => {
                for (r, d) in d_in.iter_mut().enumerate() {
                    d.copy_from_slice(d_out.row(r));
                }
            }
        }
        d_in
    }
}

fn fuse_rows(rows: &[&[f64]], mode: FusionMode) -> Result<(Mat, FusionRoute)> {
    let Some(first) = rows.first() else {
        return Err(VistexError::InvalidInput("nothing to fuse".into()));
    };
    let width = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(VistexError::Shape(format!("row width {} != {width}", bad.len())));
    }
    let n = rows.len();
    Ok(match mode {
        FusionMode::Max => {
            let mut out = first.to_vec();
            let mut src = vec![0; width];
            for (i, r) in rows.iter().enumerate().skip(1) {
                for c in 0..width {
                    // strict comparison keeps the first maximiser
                    if r[c] > out[c] {
                        out[c] = r[c];
                        src[c] = i;
                    }
                }
            }
            (Mat::from_vec(1, width, out), FusionRoute::Select(vec![src]))
        }
        FusionMode::Average | FusionMode::Addition => {
            let w = if mode == FusionMode::Average { 1.0 / n as f64 } else { 1.0 };
            let mut out = vec![0.0; width];
            for r in rows {
                for (o, v) in out.iter_mut().zip(r.iter()) {
                    *o += v;
                }
            }
            if n > 1 {
                out.iter_mut().for_each(|v| *v *= w);
            }
            (Mat::from_vec(1, width, out), FusionRoute::Scaled(w))
        }
        FusionMode::Concat => (Mat::from_vec(n, width, rows.concat()), FusionRoute::Stack),
    })
}

/// Multi-stage fusion of the stage tokens of one support exemplar.
pub fn fuse_stages(stage_tokens: &[TextualizedStageToken], mode: FusionMode) -> Result<Mat> {
    Ok(fuse_stages_routed(stage_tokens, mode)?.0)
}

pub fn fuse_stages_routed(stage_tokens: &[TextualizedStageToken], mode: FusionMode) -> Result<(Mat, FusionRoute)> {
    let rows: Vec<&[f64]> = stage_tokens.iter().map(|t| t.row.as_slice()).collect();
    fuse_rows(&rows, mode)
}

/// Combines the K shot tokens of one class. `Concat` keeps every row of
/// every shot; the other modes reduce row-wise across shots, which needs
/// equal row counts.
pub fn fuse_shots(shot_tokens: &[TextualizedToken], mode: FusionMode) -> Result<Mat> {
    Ok(fuse_shots_routed(shot_tokens, mode)?.0)
}

pub fn fuse_shots_routed(shot_tokens: &[TextualizedToken], mode: FusionMode) -> Result<(Mat, Vec<FusionRoute>)> {
    let Some(first) = shot_tokens.first() else {
        return Err(VistexError::InvalidInput("no shot tokens".into()));
    };
    let width = first.rows.cols;
    if shot_tokens.iter().any(|t| t.rows.cols != width) {
        return Err(VistexError::Shape("shot tokens differ in width".into()));
    }
    if mode == FusionMode::Concat {
        let mats: Vec<&Mat> = shot_tokens.iter().map(|t| &t.rows).collect();
        return Ok((Mat::vstack(&mats), vec![FusionRoute::Stack]));
    }
    let r = first.rows.rows;
    if shot_tokens.iter().any(|t| t.rows.rows != r) {
        return Err(VistexError::Shape("shot tokens differ in row count".into()));
    }
    let mut out = Mat::zeros(r, width);
    let mut routes = Vec::with_capacity(r);
    for row in 0..r {
        let rows: Vec<&[f64]> = shot_tokens.iter().map(|t| t.rows.row(row)).collect();
        let (m, route) = fuse_rows(&rows, mode)?;
        out.row_mut(row).copy_from_slice(m.row(0));
        routes.push(route);
    }
    Ok((out, routes))
}
