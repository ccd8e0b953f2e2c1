//! Property-based checks of the algebraic identities the solver relies on:
//! convolution linearity and adjointness, subspace-correction projection
//! properties, Galerkin symmetry, and checkpoint round-trips.

use metamg::discretize::{
    assemble_matrix, galerkin_coarse, q1_stencil_2d, transfer_stencils, LevelOperator, PdeSpec,
};
use metamg::grid::{conv, GridField, StencilKernel};
use metamg::params::{Param, ParamSet};
use metamg::smoother::{gs_apply, jacobi_apply, krylov_basis, sc_apply, SubspaceBasis};
use proptest::prelude::*;

/// Random field with the given channel count on a small 2D grid.
fn field_strategy(channels: usize, ny: usize, nx: usize) -> impl Strategy<Value = GridField> {
    prop::collection::vec(-1.0f64..1.0, channels * ny * nx).prop_map(move |data| {
        GridField::from_vec(channels, &[ny, nx], data).unwrap()
    })
}

/// Random single-channel 3x3 kernel.
fn kernel_strategy() -> impl Strategy<Value = StencilKernel> {
    prop::collection::vec(-1.0f64..1.0, 9)
        .prop_map(|data| StencilKernel::new(1, 1, &[3, 3], data).unwrap())
}

/// Random multi-channel 3x3 kernel.
fn multi_kernel_strategy(oc: usize, ic: usize) -> impl Strategy<Value = StencilKernel> {
    prop::collection::vec(-1.0f64..1.0, oc * ic * 9)
        .prop_map(move |data| StencilKernel::new(oc, ic, &[3, 3], data).unwrap())
}

/// Anisotropic operator on a small grid; the Q1 center is always positive so
/// pointwise and sweep smoothers are well defined.
fn operator_strategy() -> impl Strategy<Value = LevelOperator> {
    (0.01f64..1.0, 0.0f64..std::f64::consts::PI).prop_map(|(eps, theta)| {
        let spec = PdeSpec::Aniso2d { eps, theta, n: 8 };
        LevelOperator::new(spec.fine_stencil().unwrap(), 0)
    })
}

fn max_abs_diff(a: &GridField, b: &GridField) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn conv_is_linear(
        k in kernel_strategy(),
        x in field_strategy(1, 6, 5),
        y in field_strategy(1, 6, 5),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let mut combo = x.scaled(alpha);
        combo.axpy(beta, &y);
        let lhs = conv(&k, &combo).unwrap();
        let mut rhs = conv(&k, &x).unwrap().scaled(alpha);
        rhs.axpy(beta, &conv(&k, &y).unwrap());
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-13);
    }

    #[test]
    fn conv_adjoint_pairs_inner_products(
        k in multi_kernel_strategy(2, 3),
        x in field_strategy(3, 6, 5),
        y in field_strategy(2, 6, 5),
    ) {
        // <K x, y> == <x, K^T y> with zero padding on both sides.
        let kx = conv(&k, &x).unwrap();
        let kty = conv(&k.adjoint(), &y).unwrap();
        prop_assert!((kx.dot(&y) - x.dot(&kty)).abs() <= 1e-12);
    }

    #[test]
    fn jacobi_scales_residual_by_center(
        a in operator_strategy(),
        r in field_strategy(1, 7, 7),
        omega in 0.1f64..1.0,
    ) {
        let e = jacobi_apply(&a.stencil, &r, omega);
        let c = a.stencil.center();
        for (ei, ri) in e.data.iter().zip(&r.data) {
            prop_assert!((ei * c - omega * ri).abs() <= 1e-13);
        }
    }

    #[test]
    fn gs_solves_lower_triangular_system(
        a in operator_strategy(),
        r in field_strategy(1, 7, 7),
    ) {
        // (D + L) e == r where L is the strictly lower part of the assembled
        // matrix in lexicographic node order.
        let e = gs_apply(&a.stencil, &r).unwrap();
        let m = assemble_matrix(&a, &r.extent);
        let dense = m.to_dense();
        for i in 0..dense.len() {
            let lhs: f64 = (0..=i).map(|j| dense[i][j] * e.data[j]).sum();
            prop_assert!((lhs - r.data[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn sc_apply_is_scale_equivariant(
        a in operator_strategy(),
        g in field_strategy(4, 7, 7),
        r in field_strategy(1, 7, 7),
        c in 0.1f64..10.0,
    ) {
        let basis = SubspaceBasis::from_channels(&g);
        if let Ok(e) = sc_apply(&a, &basis, &r) {
            if let Ok(e_scaled) = sc_apply(&a, &basis, &r.scaled(c)) {
                prop_assert!(max_abs_diff(&e.scaled(c), &e_scaled) <= 1e-8 * c.max(1.0));
            }
        }
    }

    #[test]
    fn sc_residual_is_basis_orthogonal(
        a in operator_strategy(),
        r in field_strategy(1, 7, 7),
    ) {
        // After the correction, the residual has no component the subspace can
        // still reduce: G^T (r - A e) == 0.
        let basis = krylov_basis(&a, &r, 4).unwrap();
        let e = sc_apply(&a, &basis, &r).unwrap();
        let new_r = r.sub(&a.apply(&e).unwrap());
        for col in &basis.columns {
            prop_assert!(col.dot(&new_r).abs() <= 1e-9 * r.norm2().max(1.0));
        }
    }

    #[test]
    fn galerkin_coarse_preserves_symmetry(
        eps in 0.01f64..1.0,
        theta in 0.0f64..std::f64::consts::PI,
    ) {
        let spec = PdeSpec::Aniso2d { eps, theta, n: 16 };
        let fine = LevelOperator::new(spec.fine_stencil().unwrap(), 0);
        let (restrict, prolong) = transfer_stencils(2).unwrap();
        let coarse = galerkin_coarse(&fine, &restrict, &prolong).unwrap();
        let flipped = coarse.stencil.adjoint();
        for (a, b) in coarse.stencil.data.iter().zip(&flipped.data) {
            prop_assert!((a - b).abs() <= 1e-13);
        }
    }

    #[test]
    fn q1_stencil_rows_sum_to_zero(
        eps in 0.01f64..1.0,
        theta in 0.0f64..std::f64::consts::PI,
    ) {
        // Constants are in the kernel of the continuous operator, so every
        // stencil's coefficients sum to zero.
        let c = [
            [theta.cos().powi(2) + eps * theta.sin().powi(2),
             (1.0 - eps) * theta.sin() * theta.cos()],
            [(1.0 - eps) * theta.sin() * theta.cos(),
             theta.sin().powi(2) + eps * theta.cos().powi(2)],
        ];
        let k = q1_stencil_2d(&c, 1.0 / 16.0).unwrap();
        prop_assert!(k.weight_sum().abs() <= 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        a in prop::collection::vec(prop::num::f64::ANY.prop_filter("finite", |x| x.is_finite()), 1..20),
        b in prop::collection::vec(-1e10f64..1e10, 4),
    ) {
        let mut params = ParamSet::new();
        let la = a.len();
        params.push(Param::new("a", &[la], a).unwrap()).unwrap();
        params.push(Param::new("b", &[2, 2], b).unwrap()).unwrap();
        let path = std::env::temp_dir().join(format!("metamg-ckpt-{}.bin", std::process::id()));
        metamg::checkpoint::save(&params, &path).unwrap();
        let loaded = metamg::checkpoint::load(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(params, loaded);
    }
}
