//! Multi-scale textualizing block.
//!
//! For one stage's pyramid `R^i_S`, every scale except the smallest is
//! pushed through a chain of stride-2 3×3 convolutions down to the smallest
//! grid (conv `k` maps scale `k` to scale `k + 1`; with sharing, one kernel
//! per step serves every source scale). The `M` resulting grids are stacked
//! (scale 0 first), collapsed over rows by a spatial affine + ReLU layer, and
//! mapped to one `d_T`-wide token by a channel affine layer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::linalg::{conv_backward, conv_forward, ConvGeom, Mat};
use crate::params::{orthogonal, Grads, ParamStore, TensorId};
use crate::toyovlm::{MultiScaleFeatures, OvlmConfig};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct MstbConfig {
    /// One conv per downsampling step shared by all source scales.
    pub sharing: bool,
    /// Additionally share the conv set between stages.
    pub share_across_stages: bool,
    /// Scales fed into the block; `None` means all.
    pub scales: Option<Vec<usize>>,
}

impl Default for MstbConfig {
    fn default() -> Self {
        Self {
            sharing: true,
            share_across_stages: false,
            scales: None,
        }
    }
}

impl MstbConfig {
    pub fn used_scales(&self, m: usize) -> Vec<usize> {
        match &self.scales {
            Some(s) => s.clone(),
            None => (0..m).collect(),
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        let used = self.used_scales(m);
        if used.is_empty() || used.iter().any(|&j| j >= m) || used.windows(2).any(|w| w[0] >= w[1]) {
            return Err(VistexError::InvalidConfig(format!(
                "scale subset {used:?} must be strictly increasing within 0..{m}"
            )));
        }
        Ok(())
    }
}

/// Parameter tallies, split into the conv chains and the per-stage MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub conv: usize,
    pub mlp: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.conv + self.mlp
    }
}

/// Learnable-parameter count of a block over all scales with per-stage
/// conv sets.
pub fn mstb_param_count(config: &OvlmConfig, sharing: bool) -> ParamCount {
    let m = config.scales;
    let di = config.d_visual;
    let per_conv = 9 * di * di + di;
    let convs_per_stage = if sharing { m - 1 } else { m * (m - 1) / 2 };
    let stages = config.stages + 1;
    let small = (config.grid_h >> (m - 1)) * (config.grid_w >> (m - 1));
    let mlp = (m * small + 1) + (di * config.d_text + config.d_text);
    ParamCount {
        conv: stages * convs_per_stage * per_conv,
        mlp: stages * mlp,
    }
}

/// One textualized row `~P^i_S`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextualizedStageToken {
    pub stage: usize,
    pub row: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct DownConv {
    weight: TensorId,
    bias: TensorId,
}

#[derive(Clone, Copy, Debug)]
struct StageMlp {
    spatial_w: TensorId,
    spatial_b: TensorId,
    channel_w: TensorId,
    channel_b: TensorId,
}

/// `(owner stage, source scale when unshared, step)`.
type ConvKey = (usize, Option<usize>, usize);

#[derive(Clone, Debug)]
pub struct Mstb {
    pub ovlm: OvlmConfig,
    pub config: MstbConfig,
    pub params: ParamStore,
    convs: BTreeMap<ConvKey, DownConv>,
    mlps: Vec<StageMlp>,
}

struct ChainStep {
    patches: Mat,
    h: usize,
    w: usize,
    key: ConvKey,
}

/// Saved activations of one `textualize_stage` call.
pub struct StageTokenCache {
    stage: usize,
    chains: Vec<Vec<ChainStep>>,
    concat: Mat,
    spatial_pre: Vec<f64>,
    spatial_act: Vec<f64>,
}

impl Mstb {
    pub fn new(ovlm: OvlmConfig, config: MstbConfig, seed: u64) -> Result<Self> {
        Self::build(ovlm, config, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Same layout with every value zero; used when loading checkpoints.
    pub fn zeroed(ovlm: OvlmConfig, config: MstbConfig) -> Result<Self> {
        Self::build(ovlm, config, None)
    }

    fn build(ovlm: OvlmConfig, config: MstbConfig, mut rng: Option<ChaCha8Rng>) -> Result<Self> {
        ovlm.validate()?;
        let m = ovlm.scales;
        config.validate(m)?;
        let di = ovlm.d_visual;
        let used = config.used_scales(m);
        let mut params = ParamStore::new();
        let mut convs = BTreeMap::new();

        let owners: Vec<usize> = if config.share_across_stages {
            vec![0]
        } else {
            (0..=ovlm.stages).collect()
        };
        for &owner in &owners {
            let prefix = if config.share_across_stages {
                "mstb".to_string()
            } else {
                format!("mstb.stage.{owner}")
            };
            let sources: Vec<Option<usize>> = if config.sharing {
                vec![None]
            } else {
                used.iter().filter(|&&j| j + 1 < m).map(|&j| Some(j)).collect()
            };
            for src in sources {
                let first = src.unwrap_or(0);
                for k in first..m.saturating_sub(1) {
                    let name = match src {
                        None => format!("{prefix}.down.{k}"),
                        Some(j) => format!("{prefix}.scale.{j}.down.{k}"),
                    };
                    let w = match rng.as_mut() {
                        Some(r) => orthogonal(r, 9 * di, di, 0.1),
                        None => vec![0.0; 9 * di * di],
                    };
                    let weight = params.add(format!("{name}.weight"), &[3, 3, di, di], w);
                    let bias = params.add(format!("{name}.bias"), &[di], vec![0.0; di]);
                    convs.insert((owner, src, k), DownConv { weight, bias });
                }
            }
        }

        let n_rows = Self::concat_rows_for(&ovlm, used.len());
        let init = rng.is_some();
        let mlps = (0..=ovlm.stages)
            .map(|i| {
                let p = format!("mstb.stage.{i}.mlp");
                let sw = if init { vec![1.0 / n_rows as f64; n_rows] } else { vec![0.0; n_rows] };
                StageMlp {
                    spatial_w: params.add(format!("{p}.spatial.weight"), &[n_rows], sw),
                    spatial_b: params.add(format!("{p}.spatial.bias"), &[1], vec![0.0]),
                    channel_w: params.add(format!("{p}.channel.weight"), &[di, ovlm.d_text], vec![0.0; di * ovlm.d_text]),
                    channel_b: params.add(format!("{p}.channel.bias"), &[ovlm.d_text], vec![0.0; ovlm.d_text]),
                }
            })
            .collect();
        Ok(Self {
            ovlm,
            config,
            params,
            convs,
            mlps,
        })
    }

    /// `|scales| · (H/2^{M−1}) · (W/2^{M−1})`.
    pub fn concat_rows_for(ovlm: &OvlmConfig, n_scales: usize) -> usize {
        let m = ovlm.scales;
        n_scales * (ovlm.grid_h >> (m - 1)) * (ovlm.grid_w >> (m - 1))
    }

    pub fn concat_rows(&self) -> usize {
        Self::concat_rows_for(&self.ovlm, self.config.used_scales(self.ovlm.scales).len())
    }

    fn conv_key(&self, stage: usize, source: usize, step: usize) -> ConvKey {
        let owner = if self.config.share_across_stages { 0 } else { stage };
        let src = if self.config.sharing { None } else { Some(source) };
        (owner, src, step)
    }

    /// Eq.-style textualization of one stage's pyramid into a `1 × d_T` row.
    pub fn textualize_stage(&self, features: &MultiScaleFeatures, stage: usize) -> Result<TextualizedStageToken> {
        Ok(self.textualize_stage_cached(features, stage)?.0)
    }

    pub fn textualize_stage_cached(&self, features: &MultiScaleFeatures, stage: usize) -> Result<(TextualizedStageToken, StageTokenCache)> {
        let cfg = &self.ovlm;
        if stage > cfg.stages {
            return Err(VistexError::InvalidStage {
                index: stage,
                max: cfg.stages,
            });
        }
        if features.row_counts() != cfg.scale_rows() || features.scales.iter().any(|s| s.cols != cfg.d_visual) {
            return Err(VistexError::Shape(format!(
                "stage features {:?} do not match pyramid {:?}",
                features.row_counts(),
                cfg.scale_rows()
            )));
        }
        let m = cfg.scales;
        let di = cfg.d_visual;
        let grids = cfg.scale_grids();
        let mut chains = Vec::new();
        let mut reduced = Vec::new();
        for j in self.config.used_scales(m) {
            let mut x = features.scales[j].clone();
            let mut steps = Vec::new();
            for k in j..m - 1 {
                let (h, w) = grids[k];
                let key = self.conv_key(stage, j, k);
                let conv = self.convs[&key];
                let g = ConvGeom {
                    h,
                    w,
                    c_in: di,
                    c_out: di,
                    stride: 2,
                };
                let (out, patches) = conv_forward(&x, &g, self.params.get(conv.weight), Some(self.params.get(conv.bias)));
                steps.push(ChainStep { patches, h, w, key });
                x = out;
            }
            chains.push(steps);
            reduced.push(x);
        }
        let concat = Mat::vstack(&reduced.iter().collect::<Vec<_>>());
        debug_assert_eq!(concat.rows, self.concat_rows());

        let mlp = self.mlps[stage];
        let sw = self.params.get(mlp.spatial_w);
        let sb = self.params.get(mlp.spatial_b)[0];
        let mut pre = vec![sb; di];
        for (r, &wr) in sw.iter().enumerate() {
            for (p, v) in pre.iter_mut().zip(concat.row(r)) {
                *p += wr * v;
            }
        }
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let dt = cfg.d_text;
        let cw = self.params.get(mlp.channel_w);
        let mut row = self.params.get(mlp.channel_b).to_vec();
        for (c, a) in act.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (o, w) in row.iter_mut().zip(&cw[c * dt..(c + 1) * dt]) {
                *o += a * w;
            }
        }
        Ok((
            TextualizedStageToken { stage, row },
            StageTokenCache {
                stage,
                chains,
                concat,
                spatial_pre: pre,
                spatial_act: act,
            },
        ))
    }

    /// Accumulates parameter gradients for one textualized row given the
    /// gradient `d_row` of the loss w.r.t. that row.
    pub fn backward_stage(&self, cache: &StageTokenCache, d_row: &[f64], grads: &mut Grads) {
        let cfg = &self.ovlm;
        let (di, dt) = (cfg.d_visual, cfg.d_text);
        let mlp = self.mlps[cache.stage];
        let p = &self.params;

        let mut dcw = vec![0.0; di * dt];
        for c in 0..di {
            for t in 0..dt {
                dcw[c * dt + t] = cache.spatial_act[c] * d_row[t];
            }
        }
        grads.accumulate(p, mlp.channel_w, &dcw);
        grads.accumulate(p, mlp.channel_b, d_row);

        let cw = p.get(mlp.channel_w);
        let d_pre: Vec<f64> = (0..di)
            .map(|c| {
                if cache.spatial_pre[c] <= 0.0 {
                    0.0
                } else {
                    cw[c * dt..(c + 1) * dt].iter().zip(d_row).map(|(w, d)| w * d).sum()
                }
            })
            .collect();
        let sw = p.get(mlp.spatial_w);
        let dsw: Vec<f64> = (0..cache.concat.rows)
            .map(|r| cache.concat.row(r).iter().zip(&d_pre).map(|(x, d)| x * d).sum())
            .collect();
        grads.accumulate(p, mlp.spatial_w, &dsw);
        grads.accumulate(p, mlp.spatial_b, &[d_pre.iter().sum()]);

        let mut d_concat = Mat::zeros(cache.concat.rows, di);
        for (r, &w) in sw.iter().enumerate() {
            for (o, d) in d_concat.row_mut(r).iter_mut().zip(&d_pre) {
                *o = w * d;
            }
        }
        let small = cache.concat.rows / cache.chains.len();
        let blocks = d_concat.split_rows(&vec![small; cache.chains.len()]);
        for (steps, mut d) in cache.chains.iter().zip(blocks) {
            for (idx, step) in steps.iter().enumerate().rev() {
                let conv = self.convs[&step.key];
                let g = ConvGeom {
                    h: step.h,
                    w: step.w,
                    c_in: di,
                    c_out: di,
                    stride: 2,
                };
                let (pg, dx) = conv_backward(&d, &step.patches, &g, p.get(conv.weight), true, idx > 0);
                let pg = pg.expect("param grads requested");
                grads.accumulate(p, conv.weight, &pg.weight);
                grads.accumulate(p, conv.bias, &pg.bias);
                match dx {
                    Some(dx) => d = dx,
                    None => break,
                }
            }
        }
    }

    /// Names of the conv tensors feeding scale `source` at `stage`, in chain order.
    pub fn chain_tensor_names(&self, stage: usize, source: usize) -> Vec<String> {
        (source..self.ovlm.scales.saturating_sub(1))
            .map(|k| self.params.spec(self.convs[&self.conv_key(stage, source, k)].weight).name.clone())
            .collect()
    }
}
