//! Data multiplexing: compress `N` input sequences into one, recover each
//! stream from the shared hidden sequence, and score token retrieval.
//!
//! Multiplexing averages key-modulated inputs position by position: output
//! position `j` is `(1/N) * sum_i key_i ⊙ inputs[i][j]`. The key vectors are
//! drawn once from the kit seed and never trained. Demultiplexing applies a
//! per-stream learned map `ψ_i` to every position; by default `ψ_i` is affine,
//! with a config-gated single-hidden-layer variant.

use serde::{Deserialize, Serialize};

use crate::math::{DeterministicRng, Matrix, RngKey};
use crate::{Error, Result};

/// Floor applied to target probabilities inside [`retrieval_loss`] so a zero
/// prediction yields a large finite loss instead of infinity.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

/// A sequence of `len` positions, each a `dim`-dimensional real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence(Matrix);

impl TokenSequence {
    pub fn new(mat: Matrix) -> TokenSequence {
        TokenSequence(mat)
    }

    pub fn from_positions(rows: &[Vec<f64>]) -> Result<TokenSequence> {
        Ok(TokenSequence(Matrix::from_rows(rows)?))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn position(&self, j: usize) -> &[f64] {
        self.0.row(j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Shape of the learned demultiplexing maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemuxKind {
    /// Single affine map per stream (the default).
    Affine,
    /// Affine -> GELU -> affine with the given hidden width.
    Mlp { hidden: usize },
}

/// Initialization of the demultiplexing maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemuxInit {
    /// Identity weights, zero bias: `ψ_i(x) = x` at construction.
    Identity,
    /// Identity plus Gaussian noise of the given scale.
    NoisyIdentity { scale: f64 },
}

/// One learned demultiplexing map `ψ_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DemuxMap {
    Affine {
        /// `out_dim x in_dim`.
        weight: Matrix,
        bias: Vec<f64>,
    },
    Mlp {
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
    },
}

impl DemuxMap {
    fn identity(dim: usize, kind: DemuxKind, stream: &mut DeterministicRng, noise: f64) -> DemuxMap {
        match kind {
            DemuxKind::Affine => {
                let mut weight = Matrix::identity(dim);
                if noise > 0.0 {
                    weight.add_scaled(&Matrix::gaussian(dim, dim, stream, 1.0), noise);
                }
                DemuxMap::Affine {
                    weight,
                    bias: vec![0.0; dim],
                }
            }
            DemuxKind::Mlp { hidden } => {
                // No exact identity exists through the nonlinearity; start from
                // small random weights instead.
                let scale1 = 1.0 / (dim as f64).sqrt();
                let scale2 = 1.0 / (hidden as f64).sqrt();
                DemuxMap::Mlp {
                    w1: Matrix::gaussian(hidden, dim, stream, scale1),
                    b1: vec![0.0; hidden],
                    w2: Matrix::gaussian(dim, hidden, stream, scale2),
                    b2: vec![0.0; dim],
                }
            }
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            DemuxMap::Affine { weight, .. } => weight.cols(),
            DemuxMap::Mlp { w1, .. } => w1.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            DemuxMap::Affine { weight, .. } => weight.rows(),
            DemuxMap::Mlp { w2, .. } => w2.rows(),
        }
    }

    /// Apply the map to every row of `x`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            DemuxMap::Affine { weight, bias } => {
                let mut out = x.matmul_nt(weight)?;
                add_bias_rows(&mut out, bias);
                Ok(out)
            }
            DemuxMap::Mlp { w1, b1, w2, b2 } => {
                let mut h = x.matmul_nt(w1)?;
                add_bias_rows(&mut h, b1);
                for v in h.data_mut() {
                    *v = gelu(*v);
                }
                let mut out = h.matmul_nt(w2)?;
                add_bias_rows(&mut out, b2);
                Ok(out)
            }
        }
    }

    /// Restrict the map to live input coordinates and live output coordinates.
    pub(crate) fn restrict(&self, keep_in: &[usize], keep_out: &[usize]) -> DemuxMap {
        match self {
            DemuxMap::Affine { weight, bias } => DemuxMap::Affine {
                weight: weight.select_rows(keep_out).select_cols(keep_in),
                bias: keep_out.iter().map(|&i| bias[i]).collect(),
            },
            DemuxMap::Mlp { w1, b1, w2, b2 } => DemuxMap::Mlp {
                w1: w1.select_cols(keep_in),
                b1: b1.clone(),
                w2: w2.select_rows(keep_out),
                b2: keep_out.iter().map(|&i| b2[i]).collect(),
            },
        }
    }
}

pub(crate) fn add_bias_rows(m: &mut Matrix, bias: &[f64]) {
    let cols = m.cols();
    assert_eq!(cols, bias.len());
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// GELU (tanh approximation). Smooth everywhere, which keeps the
/// finite-difference gradient checks clean.
pub(crate) fn gelu(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044_715;
    0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    const B: f64 = 0.044_715;
    let t = (A * (x + B * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
}

/// Configuration for [`MuxKit::new`].
#[derive(Debug, Clone, Copy)]
pub struct MuxKitConfig {
    /// Multiplexing width `N` (>= 1).
    pub n: usize,
    /// Key / demux dimension.
    pub dim: usize,
    pub seed: RngKey,
    pub demux: DemuxKind,
    pub init: DemuxInit,
}

/// Multiplexing kit: width `N`, one frozen Gaussian key per stream, and one
/// learned demultiplexing map per stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuxKit {
    n: usize,
    keys: Vec<Vec<f64>>,
    demux: Vec<DemuxMap>,
    seed: RngKey,
}

impl MuxKit {
    pub fn new(cfg: &MuxKitConfig) -> Result<MuxKit> {
        if cfg.n == 0 {
            return Err(Error::Empty("multiplexing width must be >= 1"));
        }
        if cfg.dim == 0 {
            return Err(Error::Empty("key dimension must be >= 1"));
        }
        // All keys come from one stream so the kit is reproducible from the
        // seed alone.
        let mut key_stream = cfg.seed.derive(0x6b65).stream();
        let keys = (0..cfg.n)
            .map(|_| (0..cfg.dim).map(|_| key_stream.next_gaussian()).collect())
            .collect();
        let noise = match cfg.init {
            DemuxInit::Identity => 0.0,
            DemuxInit::NoisyIdentity { scale } => scale,
        };
        let mut demux_stream = cfg.seed.derive(0x7073).stream();
        let demux = (0..cfg.n)
            .map(|_| DemuxMap::identity(cfg.dim, cfg.demux, &mut demux_stream, noise))
            .collect();
        Ok(MuxKit {
            n: cfg.n,
            keys,
            demux,
            seed: cfg.seed,
        })
    }

    /// Assemble a kit from explicit parts (tests, deserialization checks).
    pub fn from_parts(keys: Vec<Vec<f64>>, demux: Vec<DemuxMap>, seed: RngKey) -> Result<MuxKit> {
        if keys.is_empty() || keys.len() != demux.len() {
            return Err(Error::Shape(format!(
                "kit needs matching key/demux counts, got {} keys and {} maps",
                keys.len(),
                demux.len()
            )));
        }
        let dim = keys[0].len();
        if keys.iter().any(|k| k.len() != dim) {
            return Err(Error::Shape("ragged key vectors".into()));
        }
        Ok(MuxKit {
            n: keys.len(),
            keys,
            demux,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Dimension of the key vectors (the multiplexer input/output dimension).
    pub fn key_dim(&self) -> usize {
        self.keys[0].len()
    }

    pub fn demux_in_dim(&self) -> usize {
        self.demux[0].in_dim()
    }

    pub fn demux_out_dim(&self) -> usize {
        self.demux[0].out_dim()
    }

    pub fn seed(&self) -> RngKey {
        self.seed
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i]
    }

    pub fn demux_map(&self, i: usize) -> &DemuxMap {
        &self.demux[i]
    }

    pub(crate) fn demux_map_mut(&mut self, i: usize) -> &mut DemuxMap {
        &mut self.demux[i]
    }

    pub(crate) fn replace_demux(&mut self, maps: Vec<DemuxMap>) {
        assert_eq!(maps.len(), self.n);
        self.demux = maps;
    }

    pub(crate) fn with_keys(&self, keys: Vec<Vec<f64>>) -> MuxKit {
        MuxKit {
            n: self.n,
            keys,
            demux: self.demux.clone(),
            seed: self.seed,
        }
    }

    /// Mix exactly `N` equal-length sequences into one sequence:
    /// position `j` of the output is `(1/N) * sum_i key_i ⊙ inputs[i][j]`.
    pub fn multiplex(&self, inputs: &[TokenSequence]) -> Result<TokenSequence> {
        if inputs.len() != self.n {
            return Err(Error::Shape(format!(
                "multiplex expects {} inputs, got {}",
                self.n,
                inputs.len()
            )));
        }
        let len = inputs[0].len();
        let dim = self.key_dim();
        for (i, seq) in inputs.iter().enumerate() {
            if seq.len() != len {
                return Err(Error::Shape(format!(
                    "input {i} has length {}, expected {len}",
                    seq.len()
                )));
            }
            if seq.dim() != dim {
                return Err(Error::Shape(format!(
                    "input {i} has dimension {}, expected {dim}",
                    seq.dim()
                )));
            }
        }
        let inv_n = 1.0 / self.n as f64;
        let mut out = Matrix::zeros(len, dim);
        for (seq, key) in inputs.iter().zip(&self.keys) {
            for j in 0..len {
                let row = seq.position(j);
                let out_row = out.row_mut(j);
                for c in 0..dim {
                    out_row[c] += inv_n * key[c] * row[c];
                }
            }
        }
        Ok(TokenSequence(out))
    }

    /// Recover stream `i` (0-based) from a mixed hidden sequence by applying
    /// `ψ_i` at every position.
    pub fn demultiplex(&self, mixed: &TokenSequence, i: usize) -> Result<TokenSequence> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange {
                what: "demux stream",
                index: i,
                len: self.n,
            });
        }
        let map = &self.demux[i];
        if mixed.dim() != map.in_dim() {
            return Err(Error::Shape(format!(
                "mixed dimension {} does not match demux input dimension {}",
                mixed.dim(),
                map.in_dim()
            )));
        }
        Ok(TokenSequence(map.apply(mixed.as_matrix())?))
    }
}

// ---------------------------------------------------------------------------
// Demux training support
// ---------------------------------------------------------------------------

/// Forward cache for [`DemuxMap::backward`] (MLP variant only needs the
/// hidden pre-activation).
pub(crate) struct DemuxTape {
    hidden_pre: Option<Matrix>,
}

/// Gradients mirroring one [`DemuxMap`].
#[derive(Debug, Clone)]
pub(crate) enum DemuxGrads {
    Affine { weight: Matrix, bias: Vec<f64> },
    Mlp { w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64> },
}

impl DemuxGrads {
    pub(crate) fn zeros_like(map: &DemuxMap) -> DemuxGrads {
        match map {
            DemuxMap::Affine { weight, bias } => DemuxGrads::Affine {
                weight: Matrix::zeros(weight.rows(), weight.cols()),
                bias: vec![0.0; bias.len()],
            },
            DemuxMap::Mlp { w1, b1, w2, b2 } => DemuxGrads::Mlp {
                w1: Matrix::zeros(w1.rows(), w1.cols()),
                b1: vec![0.0; b1.len()],
                w2: Matrix::zeros(w2.rows(), w2.cols()),
                b2: vec![0.0; b2.len()],
            },
        }
    }
}

/// Gradients for every demux map of a kit (keys are frozen, never trained).
#[derive(Debug, Clone)]
pub(crate) struct KitGrads {
    pub maps: Vec<DemuxGrads>,
}

impl KitGrads {
    pub(crate) fn zeros_like(kit: &MuxKit) -> KitGrads {
        KitGrads {
            maps: kit.demux.iter().map(DemuxGrads::zeros_like).collect(),
        }
    }
}

impl DemuxMap {
    pub(crate) fn apply_with_tape(&self, x: &Matrix) -> Result<(Matrix, DemuxTape)> {
        match self {
            DemuxMap::Affine { .. } => Ok((self.apply(x)?, DemuxTape { hidden_pre: None })),
            DemuxMap::Mlp { w1, b1, w2, b2 } => {
                let mut pre = x.matmul_nt(w1)?;
                add_bias_rows(&mut pre, b1);
                let mut act = pre.clone();
                for v in act.data_mut() {
                    *v = gelu(*v);
                }
                let mut out = act.matmul_nt(w2)?;
                add_bias_rows(&mut out, b2);
                Ok((
                    out,
                    DemuxTape {
                        hidden_pre: Some(pre),
                    },
                ))
            }
        }
    }

    /// Accumulate parameter gradients and return the gradient with respect to
    /// the map input. `input` is the matrix the forward pass was applied to.
    pub(crate) fn backward(
        &self,
        input: &Matrix,
        tape: &DemuxTape,
        d_out: &Matrix,
        grads: &mut DemuxGrads,
    ) -> Matrix {
        match (self, grads) {
            (DemuxMap::Affine { weight, .. }, DemuxGrads::Affine { weight: gw, bias: gb }) => {
                gw.add_scaled(&d_out.matmul_tn(input).expect("shapes"), 1.0);
                add_col_sums(d_out, gb);
                d_out.matmul(weight).expect("shapes")
            }
            (DemuxMap::Mlp { w1, w2, .. }, DemuxGrads::Mlp { w1: g1, b1: gb1, w2: g2, b2: gb2 }) => {
                let pre = tape.hidden_pre.as_ref().expect("mlp tape");
                let mut act = pre.clone();
                for v in act.data_mut() {
                    *v = gelu(*v);
                }
                g2.add_scaled(&d_out.matmul_tn(&act).expect("shapes"), 1.0);
                add_col_sums(d_out, gb2);
                let mut d_pre = d_out.matmul(w2).expect("shapes");
                for (d, p) in d_pre.data_mut().iter_mut().zip(pre.data()) {
                    *d *= gelu_derivative(*p);
                }
                g1.add_scaled(&d_pre.matmul_tn(input).expect("shapes"), 1.0);
                add_col_sums(&d_pre, gb1);
                d_pre.matmul(w1).expect("shapes")
            }
            _ => panic!("gradient container does not match map kind"),
        }
    }

    pub(crate) fn add_scaled_grads(&mut self, grads: &DemuxGrads, scale: f64) {
        match (self, grads) {
            (DemuxMap::Affine { weight, bias }, DemuxGrads::Affine { weight: gw, bias: gb }) => {
                weight.add_scaled(gw, scale);
                for (b, g) in bias.iter_mut().zip(gb) {
                    *b += scale * g;
                }
            }
            (
                DemuxMap::Mlp { w1, b1, w2, b2 },
                DemuxGrads::Mlp { w1: g1, b1: gb1, w2: g2, b2: gb2 },
            ) => {
                w1.add_scaled(g1, scale);
                w2.add_scaled(g2, scale);
                for (b, g) in b1.iter_mut().zip(gb1) {
                    *b += scale * g;
                }
                for (b, g) in b2.iter_mut().zip(gb2) {
                    *b += scale * g;
                }
            }
            _ => panic!("gradient container does not match map kind"),
        }
    }
}

impl MuxKit {
    pub(crate) fn add_scaled_demux_grads(&mut self, grads: &KitGrads, scale: f64) {
        for (map, g) in self.demux.iter_mut().zip(&grads.maps) {
            map.add_scaled_grads(g, scale);
        }
    }

    /// Gradient of the multiplex output with respect to input stream `i`:
    /// `(1/N) * key_i ⊙ d_mixed`, elementwise per position.
    pub(crate) fn multiplex_backward(&self, d_mixed: &Matrix, i: usize) -> Matrix {
        let inv_n = 1.0 / self.n as f64;
        let key = &self.keys[i];
        Matrix::from_fn(d_mixed.rows(), d_mixed.cols(), |r, c| {
            inv_n * key[c] * d_mixed.get(r, c)
        })
    }
}

fn add_col_sums(m: &Matrix, out: &mut [f64]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

/// Retrieval warm-up loss: `sum_j -log P(w_j | h_j)` over one stream's
/// positions. `probs` holds one normalized distribution per position (row);
/// `targets` the true token ids. Probabilities below [`LOG_PROB_FLOOR`] are
/// clamped so the loss stays finite.
pub fn retrieval_loss(probs: &Matrix, targets: &[usize]) -> Result<f64> {
    if probs.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} probability rows vs {} targets",
            probs.rows(),
            targets.len()
        )));
    }
    let vocab = probs.cols();
    let mut total = 0.0;
    for (j, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::IndexOutOfRange {
                what: "target token",
                index: t,
                len: vocab,
            });
        }
        total -= probs.get(j, t).max(LOG_PROB_FLOOR).ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f64]]) -> TokenSequence {
        TokenSequence::from_positions(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn identity_kit(n: usize, dim: usize) -> MuxKit {
        MuxKit::new(&MuxKitConfig {
            n,
            dim,
            seed: RngKey(1),
            demux: DemuxKind::Affine,
            init: DemuxInit::Identity,
        })
        .unwrap()
    }

    #[test]
    fn multiplex_with_unit_key_is_identity_for_n1() {
        let mut kit = identity_kit(1, 3);
        kit = kit.with_keys(vec![vec![1.0, 1.0, 1.0]]);
        let x = seq(&[&[0.5, -1.0, 2.0], &[3.0, 0.0, -0.25]]);
        let mixed = kit.multiplex(std::slice::from_ref(&x)).unwrap();
        assert_eq!(mixed, x);
        // Identity demux closes the round trip exactly.
        let back = kit.demultiplex(&mixed, 0).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn multiplex_matches_hand_evaluation() {
        let kit = MuxKit::from_parts(
            vec![vec![1.0, 1.0], vec![2.0, 0.5]],
            vec![
                DemuxMap::Affine {
                    weight: Matrix::identity(2),
                    bias: vec![0.0; 2],
                },
                DemuxMap::Affine {
                    weight: Matrix::identity(2),
                    bias: vec![0.0; 2],
                },
            ],
            RngKey(0),
        )
        .unwrap();
        let x1 = seq(&[&[1.0, 2.0]]);
        let x2 = seq(&[&[3.0, 4.0]]);
        let mixed = kit.multiplex(&[x1, x2]).unwrap();
        assert_eq!(mixed.position(0), &[3.5, 2.0]);
    }

    #[test]
    fn multiplex_of_zeros_is_zero() {
        let kit = identity_kit(3, 4);
        let z = TokenSequence::new(Matrix::zeros(5, 4));
        let mixed = kit.multiplex(&[z.clone(), z.clone(), z.clone()]).unwrap();
        assert_eq!(mixed.as_matrix(), &Matrix::zeros(5, 4));
    }

    #[test]
    fn multiplex_rejects_wrong_count_and_ragged_lengths() {
        let kit = identity_kit(2, 3);
        let a = TokenSequence::new(Matrix::zeros(4, 3));
        assert!(matches!(
            kit.multiplex(std::slice::from_ref(&a)),
            Err(Error::Shape(_))
        ));
        let b = TokenSequence::new(Matrix::zeros(5, 3));
        assert!(matches!(kit.multiplex(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn multiplex_is_linear_per_stream() {
        let kit = identity_kit(2, 3);
        let mut s = RngKey(77).stream();
        let x = TokenSequence::new(Matrix::gaussian(4, 3, &mut s, 1.0));
        let y = TokenSequence::new(Matrix::gaussian(4, 3, &mut s, 1.0));
        let other = TokenSequence::new(Matrix::gaussian(4, 3, &mut s, 1.0));
        let (a, b) = (0.7, -1.3);

        let mut combo = x.as_matrix().clone();
        combo.scale(a);
        combo.add_scaled(y.as_matrix(), b);
        let left = kit
            .multiplex(&[other.clone(), TokenSequence::new(combo)])
            .unwrap();

        let mx = kit.multiplex(&[other.clone(), x]).unwrap();
        let my = kit.multiplex(&[other.clone(), y]).unwrap();
        let zero = kit
            .multiplex(&[other, TokenSequence::new(Matrix::zeros(4, 3))])
            .unwrap();
        // multiplex(o, a*x + b*y) = a*m(o,x) + b*m(o,y) - (a+b-1)*m(o,0)
        let mut right = mx.into_matrix();
        right.scale(a);
        right.add_scaled(my.as_matrix(), b);
        right.add_scaled(zero.as_matrix(), 1.0 - a - b);
        assert!(left.as_matrix().max_abs_diff(&right) < 1e-9);
    }

    #[test]
    fn permuting_inputs_with_their_keys_is_invariant() {
        let kit = identity_kit(3, 4);
        let mut s = RngKey(5).stream();
        let xs: Vec<TokenSequence> = (0..3)
            .map(|_| TokenSequence::new(Matrix::gaussian(2, 4, &mut s, 1.0)))
            .collect();
        let mixed = kit.multiplex(&xs).unwrap();

        let perm = [2usize, 0, 1];
        let permuted_keys: Vec<Vec<f64>> = perm.iter().map(|&i| kit.key(i).to_vec()).collect();
        let permuted_inputs: Vec<TokenSequence> = perm.iter().map(|&i| xs[i].clone()).collect();
        let mixed_perm = kit
            .with_keys(permuted_keys)
            .multiplex(&permuted_inputs)
            .unwrap();
        assert!(mixed.as_matrix().max_abs_diff(mixed_perm.as_matrix()) < 1e-12);
    }

    #[test]
    fn demultiplex_identity_and_constant_maps() {
        let mut kit = identity_kit(2, 3);
        let x = seq(&[&[1.0, -2.0, 0.5]]);
        assert_eq!(kit.demultiplex(&x, 0).unwrap(), x);

        *kit.demux_map_mut(1) = DemuxMap::Affine {
            weight: Matrix::zeros(3, 3),
            bias: vec![4.0, 5.0, 6.0],
        };
        let out = kit.demultiplex(&x, 1).unwrap();
        assert_eq!(out.position(0), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn demultiplex_one_dim_affine_hand_case() {
        let kit = MuxKit::from_parts(
            vec![vec![1.0]],
            vec![DemuxMap::Affine {
                weight: Matrix::new(1, 1, vec![2.0]).unwrap(),
                bias: vec![1.0],
            }],
            RngKey(0),
        )
        .unwrap();
        let out = kit.demultiplex(&seq(&[&[3.0]]), 0).unwrap();
        assert_eq!(out.position(0), &[7.0]);
    }

    #[test]
    fn demultiplex_index_out_of_range() {
        let kit = identity_kit(2, 3);
        let x = TokenSequence::new(Matrix::zeros(1, 3));
        assert!(matches!(
            kit.demultiplex(&x, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn mlp_demux_runs_and_restricts() {
        let kit = MuxKit::new(&MuxKitConfig {
            n: 2,
            dim: 4,
            seed: RngKey(3),
            demux: DemuxKind::Mlp { hidden: 6 },
            init: DemuxInit::Identity,
        })
        .unwrap();
        let x = TokenSequence::new(Matrix::gaussian(3, 4, &mut RngKey(9).stream(), 1.0));
        let out = kit.demultiplex(&x, 1).unwrap();
        assert_eq!(out.dim(), 4);

        let restricted = kit.demux_map(1).restrict(&[1, 3], &[0, 2]);
        assert_eq!(restricted.in_dim(), 2);
        assert_eq!(restricted.out_dim(), 2);
    }

    #[test]
    fn retrieval_loss_perfect_uniform_and_empty() {
        // Perfect one-hot predictions: zero loss.
        let one_hot = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(retrieval_loss(&one_hot, &[1, 0]).unwrap(), 0.0);

        // Uniform over V=4 with L=3: 3 ln 4.
        let uniform = Matrix::new(3, 4, vec![0.25; 12]).unwrap();
        let loss = retrieval_loss(&uniform, &[0, 3, 2]).unwrap();
        assert!((loss - 3.0 * 4.0f64.ln()).abs() < 1e-12);
        assert!((loss - 4.158_883_083_359_672).abs() < 1e-6);

        // Empty sum.
        let empty = Matrix::zeros(0, 4);
        assert_eq!(retrieval_loss(&empty, &[]).unwrap(), 0.0);
    }

    #[test]
    fn retrieval_loss_clamps_zero_probability() {
        let probs = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let loss = retrieval_loss(&probs, &[0]).unwrap();
        assert!((loss - (-LOG_PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn kit_keys_reproducible_from_seed() {
        let cfg = MuxKitConfig {
            n: 3,
            dim: 5,
            seed: RngKey(21),
            demux: DemuxKind::Affine,
            init: DemuxInit::Identity,
        };
        let a = MuxKit::new(&cfg).unwrap();
        let b = MuxKit::new(&cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.key(0), a.key(1));
    }
}
