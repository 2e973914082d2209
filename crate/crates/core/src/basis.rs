//! Changes of hidden-state basis.
//!
//! An affine map `(W, b)` acts on `[h; 1]` as the linear map
//! `W' = [W b; 0 1]`, so the whole network is a switched *linear* system one
//! dimension up. Any invertible `T` gives an equivalent network
//! `T W_x T^-1`, `T b_x`, `T h0`, `W_ro T^-1`; this module builds such
//! transforms and the analyses that motivate them.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::affine::AffineMap;
use crate::data::{two_hot, NgramStats, ParenSample, PAREN_CODE_DIM};
use crate::error::{IsanError, Result};
use crate::model::{run, ModelParams};
use crate::stats::pearson;

/// Largest condition estimate accepted for a basis transform.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative singular-value cutoff for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// `[W b; 0 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedAffine(DMatrix<f64>);

impl AugmentedAffine {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Wrap a matrix whose last row must be exactly `(0, .., 0, 1)`.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 || m.ncols() != n {
            return Err(IsanError::shape("augmented matrix", "square", format!("{}x{}", m.nrows(), m.ncols())));
        }
        let last = m.row(n - 1);
        if last.iter().take(n - 1).any(|&v| v != 0.0) || last[n - 1] != 1.0 {
            return Err(IsanError::Argument("augmented matrix must end in the row (0, .., 0, 1)".into()));
        }
        Ok(Self(m))
    }

    pub fn deaugment(&self) -> AffineMap {
        let n = self.0.nrows() - 1;
        AffineMap {
            weight: self.0.view((0, 0), (n, n)).into_owned(),
            bias: self.0.view((0, n), (n, 1)).column(0).into_owned(),
        }
    }
}

pub fn augment(a: &AffineMap) -> Result<AugmentedAffine> {
    let n = a.n_out();
    if a.n_in() != n {
        return Err(IsanError::shape("augment", format!("{n}x{n}"), format!("{}x{}", n, a.n_in())));
    }
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&a.weight);
    m.view_mut((0, n), (n, 1)).copy_from(&a.bias);
    m[(n, n)] = 1.0;
    Ok(AugmentedAffine(m))
}

pub fn deaugment(a: &AugmentedAffine) -> AffineMap {
    a.deaugment()
}

/// `[h; 1]`.
pub fn augment_state(h: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::from_element(h.len() + 1, 1.0);
    v.rows_mut(0, h.len()).copy_from(h);
    v
}

/// Augmented matrix of every token.
pub fn augment_model(params: &ModelParams) -> Vec<AugmentedAffine> {
    (0..params.vocab_size())
        .map(|x| augment(&params.token_map(x).expect("index in range")).expect("square transition"))
        .collect()
}

/// States of the augmented linear system started from `[h0; 1]`.
pub fn run_augmented(params: &ModelParams, tokens: &[usize]) -> Result<Vec<DVector<f64>>> {
    let mats = augment_model(params);
    let mut states = Vec::with_capacity(tokens.len() + 1);
    states.push(augment_state(&params.h0));
    for &x in tokens {
        params.vocab.check(x)?;
        let next = mats[x].matrix() * states.last().expect("nonempty");
        states.push(next);
    }
    Ok(states)
}

/// An invertible change of basis with its inverse and condition estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisTransform {
    t: DMatrix<f64>,
    inverse: DMatrix<f64>,
    condition: f64,
}

impl BasisTransform {
    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        let n = t.nrows();
        if n == 0 || t.ncols() != n {
            return Err(IsanError::shape("basis transform", "square", format!("{}x{}", t.nrows(), t.ncols())));
        }
        let sv = t.clone().svd(false, false).singular_values;
        let (max, min) = (sv.max(), sv.min());
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(IsanError::Singular { condition });
        }
        let inverse = t.clone().lu().try_inverse().ok_or(IsanError::Singular { condition })?;
        let residual = (&t * &inverse - DMatrix::identity(n, n)).amax();
        if residual > 1e-8 {
            return Err(IsanError::Residual {
                residual,
                threshold: 1e-8,
            });
        }
        Ok(Self { t, inverse, condition })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            t: DMatrix::identity(n, n),
            inverse: DMatrix::identity(n, n),
            condition: 1.0,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    /// Whether the last row is `(0, .., 0, 1)`, i.e. an affine change of
    /// coordinates of the augmented system.
    pub fn is_augmented(&self) -> bool {
        let n = self.dim();
        let last = self.t.row(n - 1);
        last.iter().take(n - 1).all(|&v| v == 0.0) && last[n - 1] == 1.0
    }
}

/// Re-express the network in a new basis.
///
/// An `n x n` transform gives `T W_x T^-1`, `T b_x`, `T h0`, `W_ro T^-1` with
/// `b_ro` unchanged. An `(n+1) x (n+1)` transform with last row
/// `(0, .., 0, 1)` acts on the augmented system (an affine change of
/// coordinates, which also shifts `b_ro`).
pub fn apply_basis(params: &ModelParams, basis: &BasisTransform) -> Result<ModelParams> {
    let n = params.hidden_dim();
    let (t, ti) = (basis.matrix(), basis.inverse());
    let mut out = params.clone();
    if basis.dim() == n {
        for w in out.transitions.iter_mut() {
            *w = t * &*w * ti;
        }
        for b in out.biases.iter_mut() {
            *b = t * &*b;
        }
        out.h0 = t * &params.h0;
        out.readout.weight = &params.readout.weight * ti;
        return Ok(out);
    }
    if basis.dim() != n + 1 || !basis.is_augmented() {
        return Err(IsanError::shape(
            "basis transform",
            format!("{n}x{n} or augmented {}x{}", n + 1, n + 1),
            format!("{}x{}", basis.dim(), basis.dim()),
        ));
    }
    // in shared mode the linear part comes out the same for every token
    let shared = params.mode == crate::model::Mode::Shared;
    for x in 0..params.vocab_size() {
        let moved = augment(&params.token_map(x)?)?;
        let mut m = t * moved.matrix() * ti;
        m.row_mut(n).fill(0.0);
        m[(n, n)] = 1.0;
        let a = AugmentedAffine(m).deaugment();
        if !shared || x == 0 {
            out.transitions[if shared { 0 } else { x }] = a.weight;
        }
        out.biases[x] = a.bias;
    }
    let h = t * augment_state(&params.h0);
    out.h0 = h.rows(0, n).into_owned();
    let mut ro = DMatrix::zeros(params.output_dim(), n + 1);
    ro.view_mut((0, 0), (params.output_dim(), n)).copy_from(&params.readout.weight);
    ro.column_mut(n).copy_from(&params.readout.bias);
    let ro = ro * ti;
    out.readout = AffineMap {
        weight: ro.columns(0, n).into_owned(),
        bias: ro.column(n).into_owned(),
    };
    Ok(out)
}

/// Orthonormal bases of the readout row space and its complement.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutSplit {
    /// `n x r`.
    pub parallel: DMatrix<f64>,
    /// `n x (n - r)`.
    pub perpendicular: DMatrix<f64>,
}

impl ReadoutSplit {
    pub fn rank(&self) -> usize {
        self.parallel.ncols()
    }

    pub fn project_parallel(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.parallel * (self.parallel.transpose() * v)
    }

    pub fn project_perpendicular(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.perpendicular * (self.perpendicular.transpose() * v)
    }

    /// `[B_par B_perp]`, an orthogonal matrix.
    pub fn combined(&self) -> DMatrix<f64> {
        let n = self.parallel.nrows();
        let mut q = DMatrix::zeros(n, n);
        q.columns_mut(0, self.rank()).copy_from(&self.parallel);
        q.columns_mut(self.rank(), n - self.rank()).copy_from(&self.perpendicular);
        q
    }
}

/// Orthonormal basis of the orthogonal complement of the columns of `b`
/// (assumed orthonormal) in `R^n`.
pub(crate) fn orthonormal_complement(b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.nrows();
    let r = b.ncols();
    if r >= n {
        return DMatrix::zeros(n, 0);
    }
    // Householder QR of [b | I]: the first r columns of Q span b, the rest
    // complete them to an orthonormal basis
    let mut m = DMatrix::zeros(n, r + n);
    m.columns_mut(0, r).copy_from(b);
    m.columns_mut(r, n).fill_with_identity();
    m.qr().q().columns(r, n - r).into_owned()
}

/// Split hidden space into the span of the readout rows and its complement.
pub fn readout_split(readout: &DMatrix<f64>) -> Result<ReadoutSplit> {
    let n = readout.ncols();
    let svd = SVD::new(readout.clone(), false, true);
    let v_t = svd.v_t.expect("requested");
    let max = svd.singular_values.max();
    if !(max > 0.0) {
        return Err(IsanError::Degenerate("readout matrix is zero".into()));
    }
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > RANK_TOLERANCE * max)
        .collect();
    let parallel = DMatrix::from_fn(n, keep.len(), |row, c| v_t[(keep[c], row)]);
    let perpendicular = orthonormal_complement(&parallel);
    Ok(ReadoutSplit {
        parallel,
        perpendicular,
    })
}

/// Per-token bias norms in each subspace and their correlation with log unigram probability.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasNorms {
    pub symbols: Vec<char>,
    pub full: Vec<f64>,
    pub parallel: Vec<f64>,
    pub perpendicular: Vec<f64>,
    pub log_unigram: Vec<f64>,
    pub corr_full: Option<f64>,
    pub corr_parallel: Option<f64>,
    pub corr_perpendicular: Option<f64>,
}

/// Symbols never seen in the statistics are left out of the correlations.
pub fn bias_subspace_norms(params: &ModelParams, split: &ReadoutSplit, stats: &NgramStats) -> Result<BiasNorms> {
    if stats.k() != params.vocab_size() {
        return Err(IsanError::shape("n-gram statistics", params.vocab_size(), stats.k()));
    }
    let mut out = BiasNorms {
        symbols: params.vocab.symbols().to_vec(),
        full: Vec::new(),
        parallel: Vec::new(),
        perpendicular: Vec::new(),
        log_unigram: Vec::new(),
        corr_full: None,
        corr_parallel: None,
        corr_perpendicular: None,
    };
    for (x, b) in params.biases.iter().enumerate() {
        out.full.push(b.norm());
        out.parallel.push(split.project_parallel(b).norm());
        out.perpendicular.push(split.project_perpendicular(b).norm());
        out.log_unigram.push(stats.unigram[x].ln());
    }
    let seen: Vec<usize> = (0..params.vocab_size()).filter(|&x| stats.unigram[x] > 0.0).collect();
    let pick = |v: &[f64]| seen.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let lp = pick(&out.log_unigram);
    out.corr_full = pearson(&lp, &pick(&out.full));
    out.corr_parallel = pearson(&lp, &pick(&out.parallel));
    out.corr_perpendicular = pearson(&lp, &pick(&out.perpendicular));
    Ok(out)
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`; `None` if either vector is zero.
pub fn cosine_distance(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((1.0 - a.dot(b) / (na * nb)).clamp(0.0, 2.0))
}

/// Pairwise cosine distances of the biases: full vectors and both projections.
/// Entries involving a zero vector are `NaN` and counted in `flagged`.
#[derive(Clone, Debug)]
pub struct CosineMatrices {
    pub full: DMatrix<f64>,
    pub parallel: DMatrix<f64>,
    pub perpendicular: DMatrix<f64>,
    pub flagged: usize,
}

pub fn bias_cosine_matrices(params: &ModelParams, split: &ReadoutSplit) -> CosineMatrices {
    let k = params.vocab_size();
    let par: Vec<DVector<f64>> = params.biases.iter().map(|b| split.project_parallel(b)).collect();
    let perp: Vec<DVector<f64>> = params.biases.iter().map(|b| split.project_perpendicular(b)).collect();
    let mut flagged = 0;
    let mut build = |vs: &[DVector<f64>]| {
        DMatrix::from_fn(k, k, |i, j| match cosine_distance(&vs[i], &vs[j]) {
            Some(_) if i == j => 0.0,
            Some(d) => d,
            None => {
                flagged += 1;
                f64::NAN
            }
        })
    };
    let full = build(&params.biases);
    let parallel = build(&par);
    let perpendicular = build(&perp);
    CosineMatrices {
        full,
        parallel,
        perpendicular,
        flagged,
    }
}

/// Explained-variance ratios of the centred states, descending, summing to 1.
pub fn pca_explained_variance(states: &[DVector<f64>]) -> Result<Vec<f64>> {
    if states.len() < 2 {
        return Err(IsanError::Argument("PCA needs at least 2 samples".into()));
    }
    let n = states[0].len();
    let m = states.len();
    let mut x = DMatrix::zeros(n, m);
    for (j, s) in states.iter().enumerate() {
        if s.len() != n {
            return Err(IsanError::shape("PCA sample", n, s.len()));
        }
        x.set_column(j, s);
    }
    let mean = x.column_mean();
    for mut col in x.column_iter_mut() {
        col -= &mean;
    }
    let cov = (&x * x.transpose()) / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut values: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(IsanError::Degenerate("states have zero variance".into()));
    }
    Ok(values.into_iter().map(|v| v / total).collect())
}

/// Hidden states of the model over each token stream (initial states included).
pub fn collect_states(params: &ModelParams, streams: &[&[usize]]) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::new();
    for s in streams {
        out.extend(run(params, s)?.states);
    }
    Ok(out)
}

/// Blocks of an augmented matrix split at `split_point` (readout coordinates first).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockView {
    pub w_rr: DMatrix<f64>,
    pub w_rc: DMatrix<f64>,
    pub w_cr: DMatrix<f64>,
    pub w_cc: DMatrix<f64>,
    pub b_r: DVector<f64>,
    pub b_c: DVector<f64>,
}

impl BlockView {
    pub fn new(m: &AugmentedAffine, split_point: usize) -> Result<Self> {
        let a = m.deaugment();
        let n = a.n_out();
        if split_point > n {
            return Err(IsanError::Index {
                index: split_point,
                len: n + 1,
            });
        }
        let c = n - split_point;
        let w = &a.weight;
        Ok(Self {
            w_rr: w.view((0, 0), (split_point, split_point)).into_owned(),
            w_rc: w.view((0, split_point), (split_point, c)).into_owned(),
            w_cr: w.view((split_point, 0), (c, split_point)).into_owned(),
            w_cc: w.view((split_point, split_point), (c, c)).into_owned(),
            b_r: a.bias.rows(0, split_point).into_owned(),
            b_c: a.bias.rows(split_point, c).into_owned(),
        })
    }

    pub fn reassemble(&self) -> AugmentedAffine {
        let r = self.w_rr.nrows();
        let c = self.w_cc.nrows();
        let n = r + c;
        let mut m = DMatrix::zeros(n + 1, n + 1);
        m.view_mut((0, 0), (r, r)).copy_from(&self.w_rr);
        m.view_mut((0, r), (r, c)).copy_from(&self.w_rc);
        m.view_mut((r, 0), (c, r)).copy_from(&self.w_cr);
        m.view_mut((r, r), (c, c)).copy_from(&self.w_cc);
        m.view_mut((0, n), (r, 1)).copy_from(&self.b_r);
        m.view_mut((r, n), (c, 1)).copy_from(&self.b_c);
        m[(n, n)] = 1.0;
        AugmentedAffine(m)
    }
}

/// Max-abs norm of each block, per token.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockNorms {
    pub symbol: char,
    pub w_rr: f64,
    pub w_rc: f64,
    pub w_cr: f64,
    pub w_cc: f64,
    pub b_r: f64,
    pub b_c: f64,
    /// Max-abs distance of the leading square part of `W^rc` from identity.
    pub w_rc_identity_error: f64,
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.amax()
    }
}

/// Block views of every token's augmented matrix plus the norm table.
pub fn block_view(params: &ModelParams, split_point: usize) -> Result<Vec<(BlockView, BlockNorms)>> {
    augment_model(params)
        .iter()
        .enumerate()
        .map(|(x, m)| {
            let v = BlockView::new(m, split_point)?;
            let r = v.w_rc.nrows().min(v.w_rc.ncols());
            let lead = v.w_rc.view((0, 0), (r, r)).into_owned();
            let norms = BlockNorms {
                symbol: params.vocab.symbol(x)?,
                w_rr: max_abs(&v.w_rr),
                w_rc: max_abs(&v.w_rc),
                w_cr: max_abs(&v.w_cr),
                w_cc: max_abs(&v.w_cc),
                b_r: if v.b_r.is_empty() { 0.0 } else { v.b_r.amax() },
                b_c: if v.b_c.is_empty() { 0.0 } else { v.b_c.amax() },
                w_rc_identity_error: max_abs(&(lead - DMatrix::identity(r, r))),
            };
            Ok((v, norms))
        })
        .collect()
}

/// Augmented `[h; 1]` states of a set of bracket samples (`h_1 .. h_T` of each),
/// with the 24-dim target code of each state: the 2-hot lagged counts
/// followed by the 2-hot current counts.
pub fn counting_targets(params: &ModelParams, samples: &[ParenSample]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = params.hidden_dim();
    let total: usize = samples.iter().map(|s| s.tokens.len()).sum();
    let mut x = DMatrix::zeros(n + 1, total);
    let mut y = DMatrix::zeros(2 * PAREN_CODE_DIM, total);
    let mut j = 0;
    for s in samples {
        let traj = run(params, &s.tokens)?;
        for (t, lag) in s.lagged_counts().into_iter().enumerate() {
            x.set_column(j, &augment_state(&traj.states[t + 1]));
            y.view_mut((0, j), (PAREN_CODE_DIM, 1)).copy_from(&two_hot(lag));
            y.view_mut((PAREN_CODE_DIM, j), (PAREN_CODE_DIM, 1)).copy_from(&two_hot(s.counts[t]));
            j += 1;
        }
    }
    Ok((x, y))
}

/// Width of the full state code: lagged counts then current counts.
pub const COUNTING_CODE_DIM: usize = 2 * PAREN_CODE_DIM;

/// Hand-built bracket counter on the bracket vocabulary: coordinates
/// `0..12` hold the 2-hot lagged counts (the readout), `12..24` the current
/// counts, the rest stay zero. Every token copies the current code into the
/// readout block and applies its saturating shift to the current code.
pub fn ideal_counting_model(hidden: usize) -> Result<ModelParams> {
    use crate::data::{paren_update, PAREN_LEVELS};
    use crate::vocab::Vocab;
    if hidden < COUNTING_CODE_DIM {
        return Err(IsanError::Argument(format!(
            "counting model needs at least {COUNTING_CODE_DIM} hidden units, got {hidden}"
        )));
    }
    let vocab = Vocab::paren();
    let c0 = PAREN_CODE_DIM;
    let mut transitions = Vec::with_capacity(vocab.len());
    for x in 0..vocab.len() {
        let mut w = DMatrix::zeros(hidden, hidden);
        for i in 0..PAREN_CODE_DIM {
            w[(i, c0 + i)] = 1.0;
        }
        for level in 0..PAREN_LEVELS {
            let [a, _] = paren_update([level, 0], x);
            w[(c0 + a, c0 + level)] = 1.0;
            let [_, b] = paren_update([0, level], x);
            w[(c0 + PAREN_LEVELS + b, c0 + PAREN_LEVELS + level)] = 1.0;
        }
        transitions.push(w);
    }
    let start = two_hot([0, 0]);
    let mut h0 = DVector::zeros(hidden);
    h0.rows_mut(0, PAREN_CODE_DIM).copy_from(&start);
    h0.rows_mut(c0, PAREN_CODE_DIM).copy_from(&start);
    let mut readout = AffineMap::zeros(PAREN_CODE_DIM, hidden);
    for i in 0..PAREN_CODE_DIM {
        readout.weight[(i, i)] = 1.0;
    }
    ModelParams::new(
        crate::model::Mode::Switched,
        vocab.clone(),
        transitions,
        vec![DVector::zeros(hidden); vocab.len()],
        h0,
        readout,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountingOptions {
    /// Ridge penalty of the state-to-code regression.
    pub ridge: f64,
    /// Largest accepted RMS regression residual.
    pub max_residual_rms: f64,
    /// Adam steps spent sparsifying the transformed matrices; 0 keeps the
    /// plain regression basis.
    pub refine_steps: usize,
    pub refine_rate: f64,
    /// Refinements from randomly rotated starts; the sparsest result wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CountingOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            max_residual_rms: 0.05,
            refine_steps: 3000,
            refine_rate: 1e-2,
            restarts: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CountingBasis {
    /// Augmented `(n+1) x (n+1)` transform.
    pub transform: BasisTransform,
    /// Dimension of the retained state span (the affine rank of the code).
    pub span_dim: usize,
    pub residual_rms: f64,
    pub residual_max: f64,
    /// Smoothed L1 size of the transformed matrices before and after refinement.
    pub sparsity_before: f64,
    pub sparsity_after: f64,
}

const L1_SMOOTHING: f64 = 1e-4;

fn sorted_svd(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let rows = m.nrows();
    let svd = SVD::new(m, true, false);
    let u = svd.u.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    (DMatrix::from_fn(rows, order.len(), |r, c| u[(r, order[c])]), values)
}

fn numerical_rank(values: &[f64], tol: f64) -> usize {
    let max = values.first().copied().unwrap_or(0.0);
    values.iter().filter(|&&v| v > tol * max).count()
}

/// Smoothed L1 norm of every `T W_x T^-1` and its gradient in `T`.
fn sparsity(t: &DMatrix<f64>, mats: &[DMatrix<f64>]) -> Option<(f64, DMatrix<f64>)> {
    let ti = t.clone().try_inverse()?;
    let tit = ti.transpose();
    let eps2 = L1_SMOOTHING * L1_SMOOTHING;
    let mut value = 0.0;
    let mut grad = DMatrix::zeros(t.nrows(), t.ncols());
    for w in mats {
        let m = t * w * &ti;
        value += m.iter().map(|v| (v * v + eps2).sqrt()).sum::<f64>();
        let g = m.map(|v| v / (v * v + eps2).sqrt());
        grad += &g * &tit * w.transpose() - m.transpose() * &g * &tit;
    }
    value.is_finite().then_some((value, grad))
}

/// Change of basis exposing the counting mechanism of a bracket model.
///
/// Augmented states `[h_t; 1]` over the samples are regressed (ridge) onto
/// the 24-dim code of lagged and current counts, inside the span of their
/// top principal directions; that span has the affine rank of the code. The
/// remaining rows are an orthonormal completion, with the last row kept at
/// `(0, .., 0, 1)`. States only fix the transform on their own span, so the
/// components along the unused directions are then tuned to make the
/// transformed matrices sparse.
pub fn find_counting_basis(
    params: &ModelParams,
    samples: &[ParenSample],
    options: &CountingOptions,
) -> Result<CountingBasis> {
    let n = params.hidden_dim();
    let nn = n + 1;
    if params.output_dim() != PAREN_CODE_DIM || params.vocab_size() != crate::vocab::PAREN_SYMBOLS.chars().count() {
        return Err(IsanError::Argument("counting basis needs a bracket-task model".into()));
    }
    if n < COUNTING_CODE_DIM {
        return Err(IsanError::Argument(format!(
            "counting basis needs at least {COUNTING_CODE_DIM} hidden units, got {n}"
        )));
    }
    let (x, y) = counting_targets(params, samples)?;
    if x.ncols() < nn {
        return Err(IsanError::Argument(format!("need at least {nn} timesteps, got {}", x.ncols())));
    }

    let mut code = DMatrix::from_element(COUNTING_CODE_DIM + 1, y.ncols(), 1.0);
    code.rows_mut(0, COUNTING_CODE_DIM).copy_from(&y);
    let (_, code_sv) = sorted_svd(code);
    let d = numerical_rank(&code_sv, 1e-8);

    let (u, _) = sorted_svd(x.clone());
    let kept = u.columns(0, d).into_owned();
    let unused = u.columns(d, nn - d).into_owned();
    let z = kept.transpose() * &x;
    let gram = &z * z.transpose() + DMatrix::identity(d, d) * options.ridge;
    let gram_inv = gram.try_inverse().ok_or(IsanError::Singular { condition: f64::INFINITY })?;
    let rows = &y * z.transpose() * gram_inv * kept.transpose();
    let residual = &rows * &x - &y;
    let residual_rms = (residual.norm_squared() / residual.len() as f64).sqrt();
    let residual_max = residual.amax();
    if !(residual_rms <= options.max_residual_rms) {
        return Err(IsanError::Residual {
            residual: residual_rms,
            threshold: options.max_residual_rms,
        });
    }

    let mut fixed = DMatrix::zeros(nn, nn);
    fixed.rows_mut(0, COUNTING_CODE_DIM).copy_from(&rows);
    fixed[(n, n)] = 1.0;
    // directions of the code image with a zero constant coordinate, completed
    // to an orthonormal basis of the non-constant coordinates
    let (image, image_sv) = sorted_svd(&fixed * &kept);
    if numerical_rank(&image_sv, 1e-8) < d {
        return Err(IsanError::Degenerate("the code does not determine the retained state span".into()));
    }
    let image = image.columns(0, d).into_owned();
    let last = image.row(n).transpose();
    let free = orthonormal_complement(&DMatrix::from_column_slice(d, 1, (&last / last.norm()).as_slice()));
    let flat = (&image * free).rows(0, n).into_owned();
    let (flat_q, _) = sorted_svd(flat);
    let complement = orthonormal_complement(&flat_q.columns(0, d - 1).into_owned());
    let mut m = DMatrix::zeros(nn, nn - d);
    m.rows_mut(0, n).copy_from(&complement);

    let mats: Vec<DMatrix<f64>> = augment_model(params).into_iter().map(AugmentedAffine::into_matrix).collect();
    let build = |m: &DMatrix<f64>| &fixed + m * unused.transpose();
    let (sparsity_before, _) = sparsity(&build(&m), &mats).ok_or(IsanError::Singular { condition: f64::INFINITY })?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for attempt in 0..options.restarts.max(1) {
        let start = if attempt == 0 { m.clone() } else { &m * random_rotation(nn - d, &mut rng) };
        let refined = refine_gauge(&start, &fixed, &unused, &mats, options);
        if let Some((value, _)) = sparsity(&build(&refined), &mats) {
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, refined));
            }
        }
    }
    let (sparsity_after, m) = best.ok_or(IsanError::Singular { condition: f64::INFINITY })?;
    let mut t = build(&m);
    let rest = t.rows(COUNTING_CODE_DIM, n - COUNTING_CODE_DIM).into_owned();
    t.rows_mut(COUNTING_CODE_DIM, n - COUNTING_CODE_DIM).copy_from(&orthonormal_rows(&rest)?);
    let transform = BasisTransform::new(t)?;
    Ok(CountingBasis {
        transform,
        span_dim: d,
        residual_rms,
        residual_max,
        sparsity_before,
        sparsity_after,
    })
}

/// Nearest matrix with orthonormal rows spanning the same space, `(R R^T)^-1/2 R`.
fn orthonormal_rows(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.nrows() == 0 {
        return Ok(r.clone());
    }
    let eig = SymmetricEigen::new(r * r.transpose());
    if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(IsanError::Singular { condition: f64::INFINITY });
    }
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eig.eigenvectors.transpose();
    Ok(inv_sqrt * r)
}

fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Adam on the smoothed L1 objective over `T = fixed + m U^T`, `U` the unused
/// state directions; the constant row stays fixed.
fn refine_gauge(
    m: &DMatrix<f64>,
    fixed: &DMatrix<f64>,
    unused: &DMatrix<f64>,
    mats: &[DMatrix<f64>],
    options: &CountingOptions,
) -> DMatrix<f64> {
    let last = fixed.nrows() - 1;
    let (b1, b2) = (0.9f64, 0.999f64);
    let mut m = m.clone();
    let mut t = fixed + &m * unused.transpose();
    let mut first = DMatrix::zeros(m.nrows(), m.ncols());
    let mut second = DMatrix::zeros(m.nrows(), m.ncols());
    for step in 1..=options.refine_steps {
        let Some((_, grad_t)) = sparsity(&t, mats) else { break };
        let mut g = grad_t * unused;
        g.row_mut(last).fill(0.0);
        first = first * b1 + &g * (1.0 - b1);
        second = second * b2 + g.map(|v| v * v) * (1.0 - b2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let rate = options.refine_rate * (1.0 - (step - 1) as f64 / options.refine_steps as f64);
        let next_m = &m - first.zip_map(&second, |a, b| rate * (a / c1) / ((b / c2).sqrt() + 1e-12));
        let next_t = fixed + &next_m * unused.transpose();
        if BasisTransform::new(next_t.clone()).is_err() {
            break;
        }
        m = next_m;
        t = next_t;
    }
    m
}
