//! The multi-resolution pyramid: length schedule, reduction operators,
//! mask propagation, detail retention, and the reconstruction cascade.

use crate::config::ReductionKind;
use crate::error::{HrtError, Result};
use crate::ledger::{self, Category};
use crate::tensor::{Tensor, Var};

/// One resolution level: the representation matrix, a validity mask, and
/// (for wavelet reduction, levels above the finest) the Haar detail
/// coefficients produced when this level was built from its finer parent.
#[derive(Debug, Clone)]
pub struct LevelState {
    pub repr: Var,
    pub mask: Vec<bool>,
    /// Haar differences `(x_2i - x_2i+1)/sqrt(2)` at the finer level's
    /// width, kept pre-projection so reconstruction is exactly invertible
    /// in the identity-weight limit.
    pub details: Option<Var>,
}

impl LevelState {
    pub fn new(repr: Var, mask: Vec<bool>) -> Self {
        assert_eq!(repr.rows(), mask.len(), "mask length must match repr rows");
        LevelState {
            repr,
            mask,
            details: None,
        }
    }

    pub fn len(&self) -> usize {
        self.repr.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.repr.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// The ordered set {R^1 .. R^L}, finest first.
#[derive(Debug, Clone)]
pub struct ResolutionPyramid {
    pub levels: Vec<LevelState>,
}

impl ResolutionPyramid {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len()).collect()
    }
}

/// Computes the padded input length and the per-level length schedule:
/// `n_padded` is the smallest multiple of `2^(L-1)` that is >= `n_raw`,
/// and level l has length `n_padded / 2^l` (0-based l).
pub fn length_schedule(n_raw: usize, levels: usize, max_len: usize) -> Result<(usize, Vec<usize>)> {
    if levels == 0 {
        return Err(HrtError::Config("length_schedule: levels must be >= 1".into()));
    }
    if n_raw == 0 {
        return Err(HrtError::Input("length_schedule: empty input".into()));
    }
    let stride = 1usize << (levels - 1);
    let n_padded = n_raw.div_ceil(stride) * stride;
    if n_padded > max_len {
        return Err(HrtError::Capacity(format!(
            "padded length {n_padded} exceeds max_len {max_len}"
        )));
    }
    let lengths = (0..levels).map(|l| n_padded >> l).collect();
    Ok((n_padded, lengths))
}

/// Learned parameters for one level transition of the reduction operator.
#[derive(Debug, Clone)]
pub struct ReductionParams {
    /// `d_l x d_(l+1)` for wavelet/avg_pool; `2*d_l x d_(l+1)` for
    /// linear_strided.
    pub proj: Var,
}

fn even_odd_indices(len: usize) -> (Vec<usize>, Vec<usize>) {
    let half = len / 2;
    let even = (0..half).map(|i| 2 * i).collect();
    let odd = (0..half).map(|i| 2 * i + 1).collect();
    (even, odd)
}

/// Halves a level: Haar averaging (or the pooling/linear ablation variants)
/// followed by the learned width projection. A coarse position is valid iff
/// either child is valid. For `Wavelet`, the Haar differences are stored on
/// the coarse state for the reconstruction cascade.
pub fn reduce(
    level: &LevelState,
    level_index: usize,
    kind: ReductionKind,
    params: &ReductionParams,
) -> Result<LevelState> {
    let len = level.len();
    if len < 2 || len % 2 != 0 {
        return Err(HrtError::Internal(format!(
            "reduce: level length {len} must be even and >= 2 (padding guarantees this)"
        )));
    }
    let d_in = level.dim();
    ledger::set_label(Category::Reduction, level_index + 1);

    let mut coarse_mask = Vec::with_capacity(len / 2);
    for i in 0..len / 2 {
        coarse_mask.push(level.mask[2 * i] || level.mask[2 * i + 1]);
    }

    let (repr, details) = match kind {
        ReductionKind::Wavelet => {
            let (even, odd) = even_odd_indices(len);
            let e = level.repr.gather_rows(&even)?;
            let o = level.repr.gather_rows(&odd)?;
            let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;
            let approx = e.add(&o)?.scale(inv_sqrt2)?;
            let detail = e.sub(&o)?.scale(inv_sqrt2)?;
            (approx.matmul(&params.proj)?, Some(detail))
        }
        ReductionKind::AvgPool => {
            let (even, odd) = even_odd_indices(len);
            let e = level.repr.gather_rows(&even)?;
            let o = level.repr.gather_rows(&odd)?;
            let approx = e.add(&o)?.scale(0.5)?;
            (approx.matmul(&params.proj)?, None)
        }
        ReductionKind::LinearStrided => {
            let pairs = level.repr.reshape(len / 2, 2 * d_in)?;
            (pairs.matmul(&params.proj)?, None)
        }
    };

    Ok(LevelState {
        repr,
        mask: coarse_mask,
        details,
    })
}

/// Learned parameters for the reconstruction cascade g. One entry per
/// transition (coarse -> fine), coarsest transition first.
#[derive(Debug, Clone)]
pub struct ReconstructionParams {
    /// Width maps d_(l+1) -> d_l, index l-1 for the transition into level l.
    pub up_projs: Vec<Var>,
    /// Detail maps d_l -> d_l, same indexing; used only for wavelet details.
    pub detail_projs: Vec<Var>,
}

/// Rebuilds an n x d_1 fine sequence by cascading from the coarsest level:
/// learned width map, duplicate-upsample scaled by 1/sqrt(2), plus a learned
/// map of the stored Haar details where available. With identity weights and
/// wavelet details this inverts the reduction exactly.
pub fn reconstruct(pyramid: &ResolutionPyramid, params: &ReconstructionParams) -> Result<Var> {
    let levels = &pyramid.levels;
    let top = levels
        .last()
        .ok_or_else(|| HrtError::Internal("reconstruct: empty pyramid".into()))?;
    let mut x = top.repr.clone();
    if levels.len() == 1 {
        return Ok(x);
    }
    let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;
    for fine_idx in (0..levels.len() - 1).rev() {
        ledger::set_label(Category::Reconstruction, fine_idx + 1);
        let coarse = &levels[fine_idx + 1];
        let fine_len = levels[fine_idx].len();
        // Width map d_(l+1) -> d_l, then duplicate each coarse row into its
        // two children with the orthonormal Haar scale.
        let mapped = x.matmul(&params.up_projs[fine_idx])?;
        let dup: Vec<usize> = (0..fine_len).map(|i| i / 2).collect();
        let mut up = mapped.gather_rows(&dup)?.scale(inv_sqrt2)?;
        if let Some(details) = &coarse.details {
            let mapped_det = details.matmul(&params.detail_projs[fine_idx])?;
            let det_up = mapped_det.gather_rows(&dup)?.scale(inv_sqrt2)?;
            // +detail at even children, -detail at odd children.
            let signs: Vec<f64> = (0..fine_len)
                .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
                .collect();
            let sign_col = Var::constant(Tensor::from_vec(fine_len, 1, signs));
            up = up.add(&det_up.mul_col_vec(&sign_col)?)?;
        }
        x = up;
    }
    Ok(x)
}

/// Squared-error reconstruction objective: mean squared difference over
/// valid positions, normalized back up by n*d_1 (so the all-valid case is a
/// plain sum of squares). Masked positions contribute nothing.
pub fn reconstruction_loss(reconstructed: &Var, original: &Var, mask: &[bool]) -> Result<Var> {
    if reconstructed.shape() != original.shape() {
        return Err(HrtError::Dim(format!(
            "reconstruction_loss: {:?} vs {:?}",
            reconstructed.shape(),
            original.shape()
        )));
    }
    let n = original.rows();
    if mask.len() != n {
        return Err(HrtError::Dim(format!(
            "reconstruction_loss: mask length {} vs {} rows",
            mask.len(),
            n
        )));
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(HrtError::DegenerateMask(
            "reconstruction_loss: no valid positions".into(),
        ));
    }
    let mask_col = Var::constant(Tensor::from_vec(
        n,
        1,
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    ));
    let diff = reconstructed.sub(original)?.mul_col_vec(&mask_col)?;
    diff.mul(&diff)?.sum()?.scale(n as f64 / n_valid as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ident_params(d: usize) -> ReductionParams {
        ReductionParams {
            proj: Var::leaf(Tensor::eye(d)),
        }
    }

    #[test]
    fn length_schedule_five_level_pyramid() {
        let (n, lengths) = length_schedule(128, 5, 16384).unwrap();
        assert_eq!(n, 128);
        assert_eq!(lengths, vec![128, 64, 32, 16, 8]);
    }

    #[test]
    fn length_schedule_degenerate_and_padded() {
        assert_eq!(length_schedule(1, 1, 16).unwrap(), (1, vec![1]));
        let (n, lengths) = length_schedule(100, 5, 16384).unwrap();
        assert_eq!(n, 112);
        assert_eq!(lengths, vec![112, 56, 28, 14, 7]);
    }

    #[test]
    fn length_schedule_capacity_error() {
        let err = length_schedule(100, 5, 64).unwrap_err();
        assert!(matches!(err, HrtError::Capacity(_)), "{err}");
    }

    #[test]
    fn wavelet_scalar_pair_closed_form() {
        let fine = LevelState::new(
            Var::constant(Tensor::from_vec(2, 1, vec![1.0, 3.0])),
            vec![true, true],
        );
        let out = reduce(&fine, 0, ReductionKind::Wavelet, &ident_params(1)).unwrap();
        let s2 = std::f64::consts::SQRT_2;
        assert!((out.repr.value().item() - 2.0 * s2).abs() < 1e-12);
        assert!((out.details.as_ref().unwrap().value().item() + s2).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_pair() {
        let fine = LevelState::new(
            Var::constant(Tensor::from_vec(2, 1, vec![2.0, 4.0])),
            vec![true, true],
        );
        let out = reduce(&fine, 0, ReductionKind::AvgPool, &ident_params(1)).unwrap();
        assert_eq!(out.repr.value().item(), 3.0);
        assert!(out.details.is_none());
    }

    #[test]
    fn mask_propagates_by_either_child() {
        let fine = LevelState::new(
            Var::constant(Tensor::zeros(4, 1)),
            vec![true, false, false, false],
        );
        let out = reduce(&fine, 0, ReductionKind::AvgPool, &ident_params(1)).unwrap();
        assert_eq!(out.mask, vec![true, false]);
    }

    #[test]
    fn haar_round_trip_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let d = 3;
        let n = 8;
        let x = Tensor::uniform(n, d, 1.0, &mut rng);
        let l0 = LevelState::new(Var::constant(x.clone()), vec![true; n]);
        let l1 = reduce(&l0, 0, ReductionKind::Wavelet, &ident_params(d)).unwrap();
        let l2 = reduce(&l1, 1, ReductionKind::Wavelet, &ident_params(d)).unwrap();
        let pyramid = ResolutionPyramid {
            levels: vec![l0, l1, l2],
        };
        let params = ReconstructionParams {
            up_projs: vec![Var::constant(Tensor::eye(d)), Var::constant(Tensor::eye(d))],
            detail_projs: vec![Var::constant(Tensor::eye(d)), Var::constant(Tensor::eye(d))],
        };
        let rec = reconstruct(&pyramid, &params).unwrap();
        for (got, want) in rec.value().as_slice().iter().zip(x.as_slice()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn single_level_reconstruct_is_identity() {
        let x = Var::constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let pyramid = ResolutionPyramid {
            levels: vec![LevelState::new(x.clone(), vec![true, true])],
        };
        let params = ReconstructionParams {
            up_projs: vec![],
            detail_projs: vec![],
        };
        let rec = reconstruct(&pyramid, &params).unwrap();
        assert_eq!(rec.value().as_slice(), x.value().as_slice());
    }

    #[test]
    fn reconstruction_loss_cases() {
        let n = 4;
        let d = 3;
        let orig = Var::constant(Tensor::full(n, d, 2.0));
        let same = Var::constant(Tensor::full(n, d, 2.0));
        let mask = vec![true; n];
        assert_eq!(
            reconstruction_loss(&same, &orig, &mask).unwrap().value().item(),
            0.0
        );
        // Constant offset of 1 everywhere: loss = n * d under the sum convention.
        let off = Var::constant(Tensor::full(n, d, 3.0));
        assert_eq!(
            reconstruction_loss(&off, &orig, &mask).unwrap().value().item(),
            (n * d) as f64
        );
    }

    #[test]
    fn reconstruction_loss_matches_two_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let (n, d) = (6, 4);
        let a = Tensor::uniform(n, d, 2.0, &mut rng);
        let b = Tensor::uniform(n, d, 2.0, &mut rng);
        let mask = vec![true, true, false, true, true, false];
        let got = reconstruction_loss(&Var::constant(a.clone()), &Var::constant(b.clone()), &mask)
            .unwrap()
            .value()
            .item();
        let n_valid = 4;
        let mut want = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            for c in 0..d {
                let diff = a.get(r, c) - b.get(r, c);
                want += diff * diff;
            }
        }
        want *= n as f64 / n_valid as f64;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn linear_strided_uses_concatenated_pairs() {
        // proj picks out the second element of each pair: output = odd rows.
        let d = 2;
        let mut proj = Tensor::zeros(2 * d, d);
        proj.set(2, 0, 1.0);
        proj.set(3, 1, 1.0);
        let fine = LevelState::new(
            Var::constant(Tensor::from_vec(
                4,
                d,
                vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            )),
            vec![true; 4],
        );
        let params = ReductionParams {
            proj: Var::constant(proj),
        };
        let out = reduce(&fine, 0, ReductionKind::LinearStrided, &params).unwrap();
        assert_eq!(out.repr.value().as_slice(), &[3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn reduce_differentiable_through_round_trip() {
        use crate::tensor::grad_check;
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let d = 2;
        let x = Tensor::uniform(4, d, 1.0, &mut rng);
        let err = grad_check(
            |v| {
                let l0 = LevelState::new(v.clone(), vec![true; 4]);
                let l1 = reduce(&l0, 0, ReductionKind::Wavelet, &ident_params(d))?;
                let pyramid = ResolutionPyramid {
                    levels: vec![l0, l1],
                };
                let params = ReconstructionParams {
                    up_projs: vec![Var::constant(Tensor::eye(d))],
                    detail_projs: vec![Var::constant(Tensor::eye(d))],
                };
                let rec = reconstruct(&pyramid, &params)?;
                // All-valid mask: masked rows have exactly-zero gradients,
                // where finite-difference noise dominates the 1e-8 floor.
                reconstruction_loss(&rec, &v.scale(0.5)?, &[true; 4])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
