use mi_decode::features::{nscm_of, normalized_covariance};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use proptest::prelude::*;

fn window() -> impl Strategy<Value = Array2<f64>> {
    (2usize..9, 4usize..64).prop_flat_map(|(c, s)| {
        proptest::collection::vec(-1e3f64..1e3, c * s)
            .prop_map(move |v| Array2::from_shape_vec((c, s), v).unwrap())
    })
}

fn min_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| m[[i, j]])).eigenvalues.min()
}

proptest! {
    #[test]
    fn symmetric_psd_trace_c(x in window()) {
        let m = nscm_of(x.view()).unwrap();
        let c = x.nrows();
        prop_assert!((&m - &m.t()).iter().all(|d| d.abs() <= 1e-12));
        prop_assert!((m.diag().sum() - c as f64).abs() <= 1e-9);
        prop_assert!(min_eigenvalue(&m) >= -1e-10);
    }

    #[test]
    fn scale_invariant(x in window(), k in 1e-3f64..1e3) {
        let a = nscm_of(x.view()).unwrap();
        let b = nscm_of((&x * k).view()).unwrap();
        prop_assert!((&a - &b).iter().all(|d| d.abs() <= 1e-12 * a.iter().fold(1.0f64, |m, v| m.max(v.abs()))));
    }

    #[test]
    fn row_offsets_are_removed(x in window(), offsets in proptest::collection::vec(-50f64..50.0, 8)) {
        let mut shifted = x.clone();
        for (mut row, o) in shifted.rows_mut().into_iter().zip(&offsets) {
            row += *o;
        }
        let a = nscm_of(x.view()).unwrap();
        let b = nscm_of(shifted.view()).unwrap();
        prop_assert!((&a - &b).iter().all(|d| d.abs() <= 1e-8));
    }

    #[test]
    fn channel_permutation_permutes_matrix(x in window(), seed in any::<u64>()) {
        let c = x.nrows();
        let mut perm: Vec<usize> = (0..c).collect();
        let mut s = seed;
        for i in (1..c).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted = Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], j]]);
        let a = nscm_of(x.view()).unwrap();
        let b = nscm_of(permuted.view()).unwrap();
        for i in 0..c {
            for j in 0..c {
                prop_assert!((b[[i, j]] - a[[perm[i], perm[j]]]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn hand_computed_example() {
    // Rows (1, -1) and (1, 1): X Xᵀ = diag(2, 2), trace 4, times C = 2.
    let x = ndarray::array![[1.0, -1.0], [1.0, 1.0]];
    let m = normalized_covariance(x.view(), false).unwrap();
    assert_eq!(m, ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
}

#[test]
fn flat_window_is_degenerate() {
    let x = Array2::from_elem((3, 10), 4.0);
    assert!(nscm_of(x.view()).is_err());
}
