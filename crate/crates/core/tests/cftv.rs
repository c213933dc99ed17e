use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tensorvote::tensor::{cftv_vote, cftv_vote_inverse, cftv_vote_symmetric};
use tensorvote::{Decompose, Point, Scale, SymTensor};

fn psd(d: usize) -> impl Strategy<Value = SymTensor> {
    prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |a| {
        let a = DMatrix::from_vec(d, d, a);
        SymTensor::new(&a * a.transpose() + DMatrix::identity(d, d) * 1e-3).unwrap()
    })
}

fn offset(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.5f64..0.5, d).prop_filter("distinct points", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
}

fn origin(d: usize) -> Point {
    Point::new(vec![0.0; d]).unwrap()
}

fn case() -> impl Strategy<Value = (SymTensor, SymTensor, Vec<f64>, f64)> {
    (2usize..6).prop_flat_map(|d| (psd(d), psd(d), offset(d), 0.05f64..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn vote_is_linear_in_the_voter((k1, k2, x, sd) in case(), a in 0.1f64..3.0, b in 0.1f64..3.0) {
        let scale = Scale::new(sd).unwrap();
        let xi = Point::new(x).unwrap();
        let xj = origin(xi.dim());
        let mix = SymTensor::new(k1.matrix() * a + k2.matrix() * b).unwrap();
        let lhs = cftv_vote(&xi, &xj, &mix, &scale).unwrap().into_matrix();
        let rhs = cftv_vote(&xi, &xj, &k1, &scale).unwrap().into_matrix() * a
            + cftv_vote(&xi, &xj, &k2, &scale).unwrap().into_matrix() * b;
        prop_assert!((&lhs - &rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
    }

    #[test]
    fn vote_gram_matrices_are_psd((k, _, x, sd) in case()) {
        let scale = Scale::new(sd).unwrap();
        let xi = Point::new(x).unwrap();
        let s = cftv_vote(&xi, &origin(xi.dim()), &k, &scale).unwrap().into_matrix();
        for g in [&s * s.transpose(), s.transpose() * &s] {
            let eig = g.symmetric_eigen().eigenvalues;
            let top = eig.max().max(0.0);
            prop_assert!(eig.min() >= -1e-10 * top.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn symmetric_vote_is_symmetric((k, _, x, sd) in case()) {
        let scale = Scale::new(sd).unwrap();
        let xi = Point::new(x).unwrap();
        let s = cftv_vote_symmetric(&xi, &origin(xi.dim()), &k, &scale).unwrap();
        let m = s.matrix();
        prop_assert!((m - m.transpose()).norm() <= 1e-12 * (1.0 + m.norm()));
    }

    #[test]
    fn variants_agree_when_the_voter_commutes_with_the_direction(x in offset(3), sd in 0.05f64..2.0, a in 0.0f64..2.0, b in 0.01f64..2.0) {
        let scale = Scale::new(sd).unwrap();
        let xi = Point::new(x.clone()).unwrap();
        let r = DVector::from_vec(x).normalize();
        let rr = &r * r.transpose();
        // a r r^T + b I commutes with r r^T.
        let k = SymTensor::new(&rr * a + DMatrix::identity(3, 3) * b).unwrap();
        let asym = cftv_vote(&xi, &origin(3), &k, &scale).unwrap().into_matrix();
        let sym = cftv_vote_symmetric(&xi, &origin(3), &k, &scale).unwrap().into_matrix();
        prop_assert!((&asym - &sym).norm() <= 1e-10 * (1.0 + sym.norm()));
    }

    #[test]
    fn decomposition_scales_with_the_tensor((k, _, _, _) in case(), a in 0.1f64..10.0) {
        let s1 = k.decompose();
        let s2 = k.scaled(a).decompose();
        for (l1, l2) in s1.eigenvalues.iter().zip(s2.eigenvalues.iter()) {
            prop_assert!((l1 * a - l2).abs() <= 1e-10 * (1.0 + l2.abs()));
        }
        let gap_ok = (0..k.dim() - 1).all(|i| s1.eigenvalues[i] - s1.eigenvalues[i + 1] > 1e-6 * s1.eigenvalues[0]);
        if gap_ok {
            for i in 0..k.dim() {
                prop_assert!((s1.eigenvector(i).dot(&s2.eigenvector(i)).abs() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inverse_vote_matches_the_dense_product((k, _, x, sd) in case()) {
        let scale = Scale::new(sd).unwrap();
        let xi = Point::new(x).unwrap();
        let xj = origin(xi.dim());
        let c = (-xi.distance_squared(&xj).unwrap() / sd).exp();
        prop_assume!(c > 1e-6);
        let sinv = cftv_vote_inverse(&xi, &xj, &k, &scale).unwrap().into_matrix();
        let d = xi.dim();
        let r = (xi.coords() - xj.coords()).normalize();
        let rr = &r * r.transpose();
        let id = DMatrix::<f64>::identity(d, d);
        let dense = (&id - &rr * 3.0) * k.matrix() * (&id - &rr * 2.0);
        prop_assert!((sinv * c - &dense).norm() <= 1e-9 * (1.0 + dense.norm()));
    }
}
