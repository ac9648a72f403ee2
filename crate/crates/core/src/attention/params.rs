//! Trainable tensors of the decomposed-cluster transformer, their
//! initialization and the `FCPT` checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "FCPT" | u32 version | u64 d, n, k, n_block, n_head, ff_dim | f64 tensors in declaration order
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    /// Embedding width.
    pub d: usize,
    /// Cluster size, centroid included.
    pub n: usize,
    /// Number of sub-clusters.
    pub k: usize,
    pub n_block: usize,
    pub n_head: usize,
    /// Hidden width of the feedforward sublayer.
    pub ff_dim: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            d: 32,
            n: 32,
            k: 4,
            n_block: 2,
            n_head: 4,
            ff_dim: 64,
        }
    }
}

impl Hyper {
    /// Sub-cluster size `n / k`.
    pub fn s(&self) -> usize {
        self.n / self.k
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        let Hyper {
            d,
            n,
            k,
            n_block,
            n_head,
            ff_dim,
        } = *self;
        if d == 0 || n == 0 || k == 0 || n_block == 0 || n_head == 0 || ff_dim == 0 {
            return Err(Error::Config(format!(
                "all model sizes must be positive: {self:?}"
            )));
        }
        if n % k != 0 {
            return Err(Error::Config(format!(
                "sub-cluster count k={k} must divide cluster size n={n}"
            )));
        }
        if d % n_head != 0 {
            return Err(Error::Config(format!("n_head={n_head} must divide d={d}")));
        }
        Ok(())
    }
}

/// One pre-norm transformer block: multi-head self-attention and a GELU
/// feedforward, each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub w_value: Array2<f64>,
    pub w_out: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub ff_in: Array2<f64>,
    pub ff_in_bias: Array1<f64>,
    pub ff_out: Array2<f64>,
    pub ff_out_bias: Array1<f64>,
}

impl BlockParams {
    fn zeros(d: usize, f: usize) -> Self {
        BlockParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w_query: Array2::zeros((d, d)),
            w_key: Array2::zeros((d, d)),
            w_value: Array2::zeros((d, d)),
            w_out: Array2::zeros((d, d)),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            ff_in: Array2::zeros((d, f)),
            ff_in_bias: Array1::zeros(f),
            ff_out: Array2::zeros((f, d)),
            ff_out_bias: Array1::zeros(d),
        }
    }

    fn init(d: usize, f: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Self::zeros(d, f);
        b.ln1_gain.fill(1.0);
        b.ln2_gain.fill(1.0);
        for w in [
            &mut b.w_query,
            &mut b.w_key,
            &mut b.w_value,
            &mut b.w_out,
            &mut b.ff_in,
        ] {
            fill_uniform(w.as_slice_mut().unwrap(), 1.0 / (d as f64).sqrt(), rng);
        }
        fill_uniform(
            b.ff_out.as_slice_mut().unwrap(),
            1.0 / (f as f64).sqrt(),
            rng,
        );
        b
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        let named: [(&str, &'a [f64]); 12] = [
            ("ln1_gain", self.ln1_gain.as_slice().unwrap()),
            ("ln1_bias", self.ln1_bias.as_slice().unwrap()),
            ("w_query", self.w_query.as_slice().unwrap()),
            ("w_key", self.w_key.as_slice().unwrap()),
            ("w_value", self.w_value.as_slice().unwrap()),
            ("w_out", self.w_out.as_slice().unwrap()),
            ("ln2_gain", self.ln2_gain.as_slice().unwrap()),
            ("ln2_bias", self.ln2_bias.as_slice().unwrap()),
            ("ff_in", self.ff_in.as_slice().unwrap()),
            ("ff_in_bias", self.ff_in_bias.as_slice().unwrap()),
            ("ff_out", self.ff_out.as_slice().unwrap()),
            ("ff_out_bias", self.ff_out_bias.as_slice().unwrap()),
        ];
        out.extend(named.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }

    fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        let named: [(&str, &'a mut [f64]); 12] = [
            ("ln1_gain", self.ln1_gain.as_slice_mut().unwrap()),
            ("ln1_bias", self.ln1_bias.as_slice_mut().unwrap()),
            ("w_query", self.w_query.as_slice_mut().unwrap()),
            ("w_key", self.w_key.as_slice_mut().unwrap()),
            ("w_value", self.w_value.as_slice_mut().unwrap()),
            ("w_out", self.w_out.as_slice_mut().unwrap()),
            ("ln2_gain", self.ln2_gain.as_slice_mut().unwrap()),
            ("ln2_bias", self.ln2_bias.as_slice_mut().unwrap()),
            ("ff_in", self.ff_in.as_slice_mut().unwrap()),
            ("ff_in_bias", self.ff_in_bias.as_slice_mut().unwrap()),
            ("ff_out", self.ff_out.as_slice_mut().unwrap()),
            ("ff_out_bias", self.ff_out_bias.as_slice_mut().unwrap()),
        ];
        out.extend(named.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    /// `n x d`, added to the tokens before encoding.
    pub rank_embedding: Array2<f64>,
    /// Self-attention stack applied to the centroid's sub-cluster.
    pub encoder: Vec<BlockParams>,
    /// Cross stack shared by sub-clusters `1..k`.
    pub cross: Vec<BlockParams>,
    /// `d x d` correlation matrix of the centroid cross-attention.
    pub correlation: Array2<f64>,
    pub out_ln_gain: Array1<f64>,
    pub out_ln_bias: Array1<f64>,
    pub head_weight: Array1<f64>,
    /// Single-element bias of the probability head.
    pub head_bias: Array1<f64>,
}

fn fill_uniform(buf: &mut [f64], scale: f64, rng: &mut ChaCha8Rng) {
    for v in buf {
        *v = rng.random_range(-scale..scale);
    }
}

impl ModelParams {
    pub fn zeros(hyper: Hyper) -> Self {
        let Hyper {
            d,
            n,
            n_block,
            ff_dim,
            ..
        } = hyper;
        ModelParams {
            hyper,
            rank_embedding: Array2::zeros((n, d)),
            encoder: (0..n_block)
                .map(|_| BlockParams::zeros(d, ff_dim))
                .collect(),
            cross: (0..n_block)
                .map(|_| BlockParams::zeros(d, ff_dim))
                .collect(),
            correlation: Array2::zeros((d, d)),
            out_ln_gain: Array1::zeros(d),
            out_ln_bias: Array1::zeros(d),
            head_weight: Array1::zeros(d),
            head_bias: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hyper)
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.push((
            "rank_embedding".into(),
            self.rank_embedding.as_slice().unwrap(),
        ));
        for (i, b) in self.encoder.iter().enumerate() {
            b.push_tensors(&format!("encoder.{i}"), &mut out);
        }
        for (i, b) in self.cross.iter().enumerate() {
            b.push_tensors(&format!("cross.{i}"), &mut out);
        }
        out.push(("correlation".into(), self.correlation.as_slice().unwrap()));
        out.push(("out_ln_gain".into(), self.out_ln_gain.as_slice().unwrap()));
        out.push(("out_ln_bias".into(), self.out_ln_bias.as_slice().unwrap()));
        out.push(("head_weight".into(), self.head_weight.as_slice().unwrap()));
        out.push(("head_bias".into(), self.head_bias.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push((
            "rank_embedding".into(),
            self.rank_embedding.as_slice_mut().unwrap(),
        ));
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.push_tensors_mut(&format!("encoder.{i}"), &mut out);
        }
        for (i, b) in self.cross.iter_mut().enumerate() {
            b.push_tensors_mut(&format!("cross.{i}"), &mut out);
        }
        out.push((
            "correlation".into(),
            self.correlation.as_slice_mut().unwrap(),
        ));
        out.push((
            "out_ln_gain".into(),
            self.out_ln_gain.as_slice_mut().unwrap(),
        ));
        out.push((
            "out_ln_bias".into(),
            self.out_ln_bias.as_slice_mut().unwrap(),
        ));
        out.push((
            "head_weight".into(),
            self.head_weight.as_slice_mut().unwrap(),
        ));
        out.push(("head_bias".into(), self.head_bias.as_slice_mut().unwrap()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 4 + 48 + 8 * self.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let h = self.hyper;
        for v in [h.d, h.n, h.k, h.n_block, h.n_head, h.ff_dim] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for (_, t) in self.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |at: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            location: Location::Byte(at as u64),
            message: msg,
        };
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad(0, "bad magic, expected FCPT".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(4, format!("unsupported checkpoint version {version}")));
        }
        if bytes.len() < 56 {
            return Err(bad(bytes.len(), "truncated hyper record".into()));
        }
        let field = |i: usize| {
            u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize
        };
        let hyper = Hyper {
            d: field(0),
            n: field(1),
            k: field(2),
            n_block: field(3),
            n_head: field(4),
            ff_dim: field(5),
        };
        hyper.validate().map_err(|e| bad(8, e.to_string()))?;
        let mut params = ModelParams::zeros(hyper);
        let expected = 56 + 8 * params.num_params();
        if bytes.len() != expected {
            return Err(bad(
                bytes.len(),
                format!(
                    "checkpoint holds {} bytes, expected {expected}",
                    bytes.len()
                ),
            ));
        }
        let mut at = 56;
        for (_, t) in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
                at += 8;
            }
        }
        Ok(params)
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) projections, unit layer-norm
/// gains, identity correlation matrix and a zero head bias.
pub fn init_params(hyper: Hyper, seed: u64) -> Result<ModelParams> {
    hyper.validate()?;
    let Hyper {
        d, n_block, ff_dim, ..
    } = hyper;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(hyper);
    let scale = 1.0 / (d as f64).sqrt();
    fill_uniform(p.rank_embedding.as_slice_mut().unwrap(), scale, &mut rng);
    p.encoder = (0..n_block)
        .map(|_| BlockParams::init(d, ff_dim, &mut rng))
        .collect();
    p.cross = (0..n_block)
        .map(|_| BlockParams::init(d, ff_dim, &mut rng))
        .collect();
    p.correlation = Array2::eye(d);
    p.out_ln_gain.fill(1.0);
    fill_uniform(p.head_weight.as_slice_mut().unwrap(), scale, &mut rng);
    Ok(p)
}
