use multistratum::criteria::{bipartite_rank, pure_error_df, pure_error_df_numeric, BlockingScheme};
use multistratum::design_io::format_number;
use multistratum::evaluate::reduced_information;
use multistratum::fdist::f_quantile;
use multistratum::linalg::{self, DenseMatrix};
use multistratum::model::{LevelTable, TreatmentIndicator};
use multistratum::structure::{indicator, UnitStructure};
use proptest::prelude::*;

fn formula() -> impl Strategy<Value = String> {
    let leaf = (0u8..26, 2usize..5).prop_map(|(c, k)| format!("{}x({k})", (b'A' + c) as char));
    leaf.prop_recursive(3, 6, 2, |inner| {
        (inner.clone(), prop_oneof![Just('*'), Just('/')], inner).prop_map(|(a, op, b)| format!("({a}{op}{b})"))
    })
}

fn structure() -> impl Strategy<Value = UnitStructure> {
    formula().prop_filter_map("repeated name or too many units", |f| {
        UnitStructure::parse(&f).ok().filter(|s| s.n() <= 64)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rendering_parses_back(s in structure()) {
        let again = UnitStructure::parse(&s.to_string()).unwrap();
        prop_assert_eq!(&again, &s);
    }

    #[test]
    fn hasse_df_matches_projector_traces(s in structure()) {
        let df: Vec<usize> = s.strata().iter().map(|t| t.df).collect();
        prop_assert_eq!(df.clone(), s.projector_df());
        prop_assert_eq!(df[1..].iter().sum::<usize>(), s.n() - 1);
    }

    #[test]
    fn bipartite_rank_is_matrix_rank(
        a in prop::collection::vec(0usize..5, 1..30),
        seed in prop::collection::vec(0usize..6, 30),
    ) {
        let b: Vec<usize> = seed[..a.len()].to_vec();
        let (ca, la) = compact(&a);
        let (cb, lb) = compact(&b);
        let z = linalg::hstack(&[&indicator(&la, ca), &indicator(&lb, cb)]);
        prop_assert_eq!(bipartite_rank(&la, ca, &lb, cb), linalg::rank(&z).unwrap());
    }

    #[test]
    fn closed_form_pure_error_matches_rank(
        blocks in prop::collection::vec(0usize..4, 4..30),
        groups in prop::collection::vec(0usize..5, 30),
    ) {
        let (_, lb) = compact(&blocks);
        let rows: Vec<Vec<f64>> = groups[..lb.len()].iter().map(|&g| vec![g as f64]).collect();
        let t = TreatmentIndicator::from_rows(&LevelTable::new(vec!["X".into()], &rows).unwrap());
        for scheme in [BlockingScheme::blocked(lb.clone()), BlockingScheme::crd(lb.len())] {
            prop_assert_eq!(pure_error_df(&scheme, &t).unwrap(), pure_error_df_numeric(&scheme, &t).unwrap());
        }
    }

    #[test]
    fn reduced_information_tracks_reparametrization(
        vals in prop::collection::vec(-1.0f64..1.0, 24),
        mix in prop::collection::vec(-1.0f64..1.0, 9),
        shift in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        // Rows of X with an intercept column, then M = X'X.
        let x = DenseMatrix::from_fn(8, 4, |i, j| if j == 0 { 1.0 } else { vals[i * 3 + j - 1] });
        let m = x.transpose() * &x;
        let a = DenseMatrix::from_row_slice(3, 3, &mix) + DenseMatrix::identity(3, 3) * 3.0;
        let mut t = DenseMatrix::identity(4, 4);
        for j in 0..3 {
            t[(0, j + 1)] = shift[j];
        }
        t.view_mut((1, 1), (3, 3)).copy_from(&a);
        let reduced = reduced_information(&(t.transpose() * &m * &t));
        let expected = a.transpose() * reduced_information(&m) * &a;
        let scale = expected.amax().max(1.0);
        prop_assert!((reduced - expected).amax() <= 1e-9 * scale);
    }

    #[test]
    fn f_quantiles_increase_with_probability(d1 in 1u32..40, d2 in 1u32..80, p in 0.05f64..0.9) {
        let lo = f_quantile(d1 as f64, d2 as f64, p).unwrap();
        let hi = f_quantile(d1 as f64, d2 as f64, p + 0.05).unwrap();
        prop_assert!(lo < hi);
    }

    #[test]
    fn printed_numbers_keep_six_digits(v in -1e6f64..1e6) {
        let back: f64 = format_number(v).parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-6 * v.abs().max(1e-300));
    }
}

fn compact(labels: &[usize]) -> (usize, Vec<usize>) {
    let mut seen = Vec::new();
    let out = labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect();
    (seen.len(), out)
}
