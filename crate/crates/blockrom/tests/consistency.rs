//! Cross-module consistency checks: the operator-set evaluation machinery
//! against an independently hand-coded right-hand side, and the block
//! model against its dense monolithic embedding.

use blockrom::fom::{build_synthetic_fom, FomConfig, ModalStructure};
use blockrom::inference::{intrusive_project, BlockOperators, OperatorSet};
use blockrom::pod::{CoupledBasis, ReducedBasis};
use blockrom::rom::rom_rhs;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Straight-line reimplementation of the coupled dynamics, written without
/// any of the library's feature-map machinery.
fn hand_coded_rhs(
    q: &DVector<f64>,
    m: usize,
    n_f: usize,
    nu: f64,
    kappa_f: f64,
    kappa_s: f64,
    omega: &[f64],
) -> DVector<f64> {
    let n_s = 2 * m;
    let h = 1.0 / (n_f as f64 + 1.0);
    let mut out = DVector::zeros(n_s + n_f);

    // Structural half: eta' = eta_dot, eta_dot' = -omega^2 eta + forcing.
    let fluid_mean: f64 = (0..n_f).map(|j| q[n_s + j]).sum::<f64>() / n_f as f64;
    for i in 0..m {
        out[i] = q[m + i];
        out[m + i] = -omega[i] * omega[i] * q[i] + kappa_s * fluid_mean;
    }

    // Fluid half: viscous diffusion, advection, and displacement forcing.
    for i in 0..n_f {
        let u = q[n_s + i];
        let left = if i > 0 { q[n_s + i - 1] } else { 0.0 };
        let right = if i + 1 < n_f { q[n_s + i + 1] } else { 0.0 };
        let viscous = nu * (left - 2.0 * u + right) / (h * h);
        let advect = -u * (right - left) / (2.0 * h);
        let forcing = if i < m { kappa_f * q[i] } else { 0.0 };
        out[n_s + i] = viscous + advect + forcing;
    }
    out
}

#[test]
fn operator_machinery_matches_hand_coded_dynamics() {
    let freqs = [3.0, 11.0];
    let cfg = FomConfig {
        modal: ModalStructure::from_frequencies_hz(&freqs),
        n_f: 12,
        nu: 0.07,
        kappa_f: 0.3,
        kappa_s: 0.2,
        ..Default::default()
    };
    let fom = build_synthetic_fom(&cfg).unwrap();
    let basis = CoupledBasis {
        structural: ReducedBasis::identity(fom.n_s),
        fluid: ReducedBasis::identity(fom.n_f),
    };
    let ops = OperatorSet::Block(intrusive_project(&fom, &basis).unwrap());

    let omega: Vec<f64> = freqs.iter().map(|f| 2.0 * std::f64::consts::PI * f).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    for _ in 0..25 {
        let q = DVector::from_fn(fom.dim(), |_, _| rng.gen_range(-1.0..1.0));
        let via_ops = rom_rhs(&ops, &q).unwrap();
        let direct = hand_coded_rhs(&q, 2, 12, 0.07, 0.3, 0.2, &omega);
        let builtin = fom.rhs(&q);
        assert!((&via_ops - &direct).abs().max() < 1e-12);
        assert!((builtin - direct).abs().max() < 1e-12);
    }
}

#[test]
fn block_rhs_equals_expanded_monolithic_rhs() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for (r_s, r_f) in [(1, 1), (2, 3), (4, 2), (3, 5)] {
        let mut random =
            |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
        let cs_r = random(r_s, 1);
        let cf_r = random(r_f, 1);
        let ops = BlockOperators {
            r_s,
            r_f,
            c_s: Some(DVector::from_column_slice(cs_r.as_slice())),
            a_s: Some(random(r_s, r_s)),
            e_s: Some(random(r_s, r_f)),
            h_s: Some(random(r_s, r_s * (r_s + 1) / 2)),
            l_s: Some(random(r_s, r_s * r_f)),
            g_s: Some(random(r_s, r_f * (r_f + 1) / 2)),
            c_f: Some(DVector::from_column_slice(cf_r.as_slice())),
            e_f: Some(random(r_f, r_s)),
            a_f: Some(random(r_f, r_f)),
            g_f: Some(random(r_f, r_s * (r_s + 1) / 2)),
            l_f: Some(random(r_f, r_s * r_f)),
            h_f: Some(random(r_f, r_f * (r_f + 1) / 2)),
        };
        let mono = OperatorSet::Monolithic(ops.to_monolithic());
        let block = OperatorSet::Block(ops);
        for _ in 0..20 {
            let q = DVector::from_fn(r_s + r_f, |_, _| rng.gen_range(-2.0..2.0));
            let a = rom_rhs(&block, &q).unwrap();
            let b = rom_rhs(&mono, &q).unwrap();
            assert!((a - b).abs().max() < 1e-12, "r_s={r_s}, r_f={r_f}");
        }
    }
}

#[test]
fn sparse_block_sets_embed_consistently() {
    // The aeroelastic preset stores only seven blocks; the embedding places
    // zeros elsewhere.
    let mut rng = ChaCha12Rng::seed_from_u64(19);
    let (r_s, r_f) = (3, 4);
    let mut random =
        |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
    let cs_r = random(r_s, 1);
    let cf_r = random(r_f, 1);
    let ops = BlockOperators {
        r_s,
        r_f,
        c_s: Some(DVector::from_column_slice(cs_r.as_slice())),
        a_s: Some(random(r_s, r_s)),
        e_s: Some(random(r_s, r_f)),
        c_f: Some(DVector::from_column_slice(cf_r.as_slice())),
        e_f: Some(random(r_f, r_s)),
        a_f: Some(random(r_f, r_f)),
        h_f: Some(random(r_f, r_f * (r_f + 1) / 2)),
        ..BlockOperators::empty(r_s, r_f)
    };
    let mono = OperatorSet::Monolithic(ops.to_monolithic());
    let block = OperatorSet::Block(ops);
    for _ in 0..20 {
        let q = DVector::from_fn(r_s + r_f, |_, _| rng.gen_range(-2.0..2.0));
        let a = rom_rhs(&block, &q).unwrap();
        let b = rom_rhs(&mono, &q).unwrap();
        assert!((a - b).abs().max() < 1e-12);
    }
}
