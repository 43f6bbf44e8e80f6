//! Static cost analyzer: exact parameter counts, FLOP counts (one
//! multiply-accumulate = one reported FLOP), and per-layer shape traces from
//! a [`ModelConfig`] alone — no weights instantiated. Also enumerates the
//! per-block stride/MLP-ratio search space.
//!
//! Counting conventions match the live model exactly: conv-embed bias,
//! layer/batch-norm affines, the cls token, attention output bias, and MLP
//! biases are all counted; the depthwise and pointwise q/k/v steps carry no
//! bias. FLOPs count conv, linear, and the two attention matmuls; norms,
//! activations, softmax, and bias adds are excluded.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{CvtError, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRecord {
    pub path: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
    /// Output shape without the batch axis; empty when no input size was
    /// given (parameter-only analysis).
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub records: Vec<LayerRecord>,
    pub total_params: u64,
    pub total_flops: u64,
    pub input_hw: Option<usize>,
}

pub fn format_params(params: u64) -> String {
    format!("{:.2}M", params as f64 / 1e6)
}

pub fn format_flops(flops: u64) -> String {
    format!("{:.2}G", flops as f64 / 1e9)
}

fn shape_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

impl CostReport {
    pub fn find(&self, path: &str) -> Option<&LayerRecord> {
        self.records.iter().find(|r| r.path == path)
    }

    /// Human-readable table, one row per layer plus a totals line.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<44} {:<16} {:>12} {:>14} {:>14}\n",
            "layer", "kind", "params", "flops", "output"
        ));
        for r in &self.records {
            out.push_str(&format!(
                "{:<44} {:<16} {:>12} {:>14} {:>14}\n",
                r.path,
                r.kind,
                r.params,
                r.flops,
                shape_string(&r.output_shape)
            ));
        }
        out.push_str(&format!(
            "total: params {} ({})  flops {} ({})\n",
            self.total_params,
            format_params(self.total_params),
            self.total_flops,
            format_flops(self.total_flops)
        ));
        out
    }

    /// Machine-readable records: five tab-separated fields per line
    /// (path, kind, params, flops, shape).
    pub fn to_records_string(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.path,
                r.kind,
                r.params,
                r.flops,
                shape_string(&r.output_shape)
            ));
        }
        out
    }
}

/// Per-block choices drawn from the search space: key/value projection
/// stride in {1, 2} and MLP expansion ratio in {2, 4}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchCandidate {
    pub base: String,
    pub stride_kv: Vec<usize>,
    pub mlp_ratio: Vec<usize>,
}

impl SearchCandidate {
    pub fn uniform(base: &ModelConfig, stride_kv: usize, mlp_ratio: usize) -> Self {
        let blocks: usize = base.stages.iter().map(|s| s.num_blocks).sum();
        SearchCandidate {
            base: base.name.clone(),
            stride_kv: vec![stride_kv; blocks],
            mlp_ratio: vec![mlp_ratio; blocks],
        }
    }
}

struct Walker<'a> {
    config: &'a ModelConfig,
    input_hw: Option<usize>,
    /// Per-global-block (stride_kv, mlp_ratio) overrides.
    overrides: Option<&'a [(usize, usize)]>,
    records: Vec<LayerRecord>,
}

impl<'a> Walker<'a> {
    fn push(&mut self, path: String, kind: &'static str, params: u64, flops: u64, shape: Vec<usize>) {
        self.records.push(LayerRecord {
            path,
            kind,
            params,
            flops,
            output_shape: shape,
        });
    }

    fn run(mut self) -> Result<CostReport> {
        self.config.validate()?;
        if let Some(ov) = self.overrides {
            let blocks: usize = self.config.stages.iter().map(|s| s.num_blocks).sum();
            if ov.len() != blocks {
                return Err(CvtError::Config(format!(
                    "candidate choice vector has length {} but the model has {} blocks",
                    ov.len(),
                    blocks
                )));
            }
        }
        let mut in_ch = self.config.input_channels;
        let mut hw = self.input_hw.map(|s| (s, s));
        let mut global_block = 0usize;
        let last_stage = self.config.stages.len() - 1;
        for (i, sc) in self.config.stages.iter().enumerate() {
            let sp = format!("stage{}", i + 1);
            let d = sc.embed_dim as u64;
            let k = sc.embed.kernel as u64;

            hw = match hw {
                Some((h, w)) => Some(sc.embed.output_hw(h, w)?),
                None => None,
            };
            let t_spatial = hw.map(|(h, w)| h * w);
            let conv_flops = t_spatial.map_or(0, |t| k * k * in_ch as u64 * d * t as u64);
            let map_shape = hw.map_or(Vec::new(), |(h, w)| vec![h, w, sc.embed_dim]);
            let token_shape = t_spatial.map_or(Vec::new(), |t| vec![t, sc.embed_dim]);
            self.push(
                format!("{sp}.embed.conv"),
                "conv",
                k * k * in_ch as u64 * d + d,
                conv_flops,
                map_shape,
            );
            self.push(
                format!("{sp}.embed.norm"),
                "layernorm",
                2 * d,
                0,
                token_shape.clone(),
            );
            let with_cls = i == last_stage;
            if with_cls {
                self.push(
                    format!("{sp}.cls_token"),
                    "cls_token",
                    d,
                    0,
                    vec![1, sc.embed_dim],
                );
            }
            let cls = with_cls as usize;
            for j in 0..sc.num_blocks {
                let bp = format!("{sp}.block{j}");
                let (stride_kv, ratio) = match self.overrides {
                    Some(ov) => ov[global_block],
                    None => (sc.proj.stride_kv, sc.mlp_ratio),
                };
                global_block += 1;
                let s = sc.proj.kernel as u64;
                let kv_hw = match hw {
                    Some((h, w)) => Some((
                        sc.proj.output_extent(h, stride_kv)?,
                        sc.proj.output_extent(w, stride_kv)?,
                    )),
                    None => None,
                };
                // The stride-1 query projection preserves the grid.
                let t_q = t_spatial.map(|t| t + cls);
                let t_kv = kv_hw.map(|(h, w)| h * w + cls);
                let q_tokens = t_q.map_or(Vec::new(), |t| vec![t, sc.embed_dim]);

                self.push(format!("{bp}.norm1"), "layernorm", 2 * d, 0, q_tokens.clone());
                for (branch, t_out_spatial, t_out, grid) in [
                    ("proj_q", t_spatial, t_q, hw),
                    ("proj_k", kv_hw.map(|(h, w)| h * w), t_kv, kv_hw),
                    ("proj_v", kv_hw.map(|(h, w)| h * w), t_kv, kv_hw),
                ] {
                    self.push(
                        format!("{bp}.attn.{branch}.depthwise"),
                        "depthwise_conv",
                        s * s * d,
                        t_out_spatial.map_or(0, |t| s * s * d * t as u64),
                        grid.map_or(Vec::new(), |(h, w)| vec![sc.embed_dim, h, w]),
                    );
                    self.push(
                        format!("{bp}.attn.{branch}.bn"),
                        "batchnorm",
                        2 * d,
                        0,
                        grid.map_or(Vec::new(), |(h, w)| vec![sc.embed_dim, h, w]),
                    );
                    self.push(
                        format!("{bp}.attn.{branch}.pointwise"),
                        "linear",
                        d * d,
                        t_out.map_or(0, |t| d * d * t as u64),
                        t_out.map_or(Vec::new(), |t| vec![t, sc.embed_dim]),
                    );
                }
                let attn_mm = match (t_q, t_kv) {
                    (Some(q), Some(kv)) => (q * kv) as u64 * d,
                    _ => 0,
                };
                self.push(
                    format!("{bp}.attn.qk"),
                    "attention_matmul",
                    0,
                    attn_mm,
                    match (t_q, t_kv) {
                        (Some(q), Some(kv)) => vec![sc.num_heads, q, kv],
                        _ => Vec::new(),
                    },
                );
                self.push(
                    format!("{bp}.attn.av"),
                    "attention_matmul",
                    0,
                    attn_mm,
                    t_q.map_or(Vec::new(), |q| {
                        vec![sc.num_heads, q, sc.embed_dim / sc.num_heads]
                    }),
                );
                self.push(
                    format!("{bp}.attn.out"),
                    "linear",
                    d * d + d,
                    t_q.map_or(0, |t| d * d * t as u64),
                    q_tokens.clone(),
                );
                self.push(format!("{bp}.norm2"), "layernorm", 2 * d, 0, q_tokens.clone());
                let r = ratio as u64;
                self.push(
                    format!("{bp}.mlp.fc1"),
                    "linear",
                    d * r * d + r * d,
                    t_q.map_or(0, |t| d * r * d * t as u64),
                    t_q.map_or(Vec::new(), |t| vec![t, sc.embed_dim * ratio]),
                );
                self.push(
                    format!("{bp}.mlp.fc2"),
                    "linear",
                    r * d * d + d,
                    t_q.map_or(0, |t| r * d * d * t as u64),
                    q_tokens.clone(),
                );
            }
            in_ch = sc.embed_dim;
        }
        let d_last = self.config.stages[last_stage].embed_dim as u64;
        let classes = self.config.num_classes as u64;
        self.push(
            "head.norm".to_string(),
            "layernorm",
            2 * d_last,
            0,
            vec![self.config.stages[last_stage].embed_dim],
        );
        self.push(
            "head.linear".to_string(),
            "linear",
            d_last * classes + classes,
            if self.input_hw.is_some() {
                d_last * classes
            } else {
                0
            },
            vec![self.config.num_classes],
        );
        let total_params = self.records.iter().map(|r| r.params).sum();
        let total_flops = self.records.iter().map(|r| r.flops).sum();
        Ok(CostReport {
            records: self.records,
            total_params,
            total_flops,
            input_hw: self.input_hw,
        })
    }
}

/// Exact learnable-scalar count per layer, independent of input size.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    Walker {
        config,
        input_hw: None,
        overrides: None,
        records: Vec::new(),
    }
    .run()
}

/// Parameter and FLOP counts plus output shapes at a given square input size.
pub fn count_flops(config: &ModelConfig, input_hw: usize) -> Result<CostReport> {
    Walker {
        config,
        input_hw: Some(input_hw),
        overrides: None,
        records: Vec::new(),
    }
    .run()
}

/// Every layer's output shape in execution order.
pub fn shape_trace(config: &ModelConfig, input_hw: usize) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(count_flops(config, input_hw)?
        .records
        .into_iter()
        .map(|r| (r.path, r.output_shape))
        .collect())
}

/// Cost of one search candidate (per-block stride/ratio overrides applied).
pub fn candidate_cost(
    config: &ModelConfig,
    candidate: &SearchCandidate,
    input_hw: usize,
) -> Result<CostReport> {
    for &s in &candidate.stride_kv {
        if !matches!(s, 1 | 2) {
            return Err(CvtError::Config(format!(
                "candidate stride_kv {s} not in {{1,2}}"
            )));
        }
    }
    for &r in &candidate.mlp_ratio {
        if !matches!(r, 2 | 4) {
            return Err(CvtError::Config(format!(
                "candidate mlp_ratio {r} not in {{2,4}}"
            )));
        }
    }
    if candidate.stride_kv.len() != candidate.mlp_ratio.len() {
        return Err(CvtError::Config(
            "candidate choice vectors must have equal length".into(),
        ));
    }
    let overrides: Vec<(usize, usize)> = candidate
        .stride_kv
        .iter()
        .zip(&candidate.mlp_ratio)
        .map(|(&s, &r)| (s, r))
        .collect();
    Walker {
        config,
        input_hw: Some(input_hw),
        overrides: Some(&overrides),
        records: Vec::new(),
    }
    .run()
}

/// Deterministically sample the search space. The first two entries are the
/// all-min (stride 2, ratio 2) and all-max (stride 2, ratio 4 — the base
/// preset itself) candidates; `sample` random candidates follow.
pub fn enumerate_search_space(
    config: &ModelConfig,
    sample: usize,
    seed: u64,
    input_hw: usize,
) -> Result<Vec<(SearchCandidate, CostReport)>> {
    let blocks: usize = config.stages.iter().map(|s| s.num_blocks).sum();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut candidates = vec![
        SearchCandidate::uniform(config, 2, 2),
        SearchCandidate::uniform(config, 2, 4),
    ];
    for _ in 0..sample {
        let stride_kv: Vec<usize> = (0..blocks)
            .map(|_| if rng.random::<bool>() { 1 } else { 2 })
            .collect();
        let mlp_ratio: Vec<usize> = (0..blocks)
            .map(|_| if rng.random::<bool>() { 2 } else { 4 })
            .collect();
        candidates.push(SearchCandidate {
            base: config.name.clone(),
            stride_kv,
            mlp_ratio,
        });
    }
    candidates
        .into_iter()
        .map(|c| candidate_cost(config, &c, input_hw).map(|r| (c, r)))
        .collect()
}

/// Clone a config with every stage's key/value projection stride replaced.
pub fn with_stride_kv(config: &ModelConfig, stride_kv: usize) -> ModelConfig {
    let mut c = config.clone();
    for s in &mut c.stages {
        s.proj.stride_kv = stride_kv;
    }
    c
}
