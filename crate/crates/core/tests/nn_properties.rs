use nalgebra::DMatrix;
use proptest::prelude::*;
use srm_dyn::nn::{frob_norm, frob_project, MlpPredictor};

fn net_from(n: usize, depth: usize, width: usize, values: &[f64]) -> MlpPredictor {
    let mut net = MlpPredictor::zeros(n, depth, width, 100.0);
    let mut it = values.iter().cycle();
    for w in &mut net.weights {
        w.iter_mut().for_each(|v| *v = *it.next().unwrap());
    }
    net
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    // The bias entry carried into the last layer is not scaled, so the
    // identity needs a zero bias column there.
    #[test]
    fn scaling_first_layer_scales_output(
        values in prop::collection::vec(-2.0f64..2.0, 40),
        x in prop::collection::vec(-1.0f64..1.0, 2),
        a in 0.0f64..5.0,
    ) {
        let mut net = net_from(2, 2, 3, &values);
        let last = net.weights.len() - 1;
        let cols = net.weights[last].ncols();
        net.weights[last].column_mut(cols - 1).fill(0.0);
        let base = net.forward(&x);
        let mut scaled = net.clone();
        scaled.weights[0] *= a;
        let out = scaled.forward(&x);
        for (o, b) in out.iter().zip(&base) {
            prop_assert!((o - a * b).abs() <= 1e-12 * (1.0 + (a * b).abs()));
        }
    }

    #[test]
    fn output_difference_is_bounded_by_product_of_norms(
        values in prop::collection::vec(-1.5f64..1.5, 60),
        depth in 1usize..4,
        width in 1usize..4,
        x in prop::collection::vec(-1.0f64..1.0, 2),
        y in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let net = net_from(2, depth, width, &values);
        let lip: f64 = net.weights.iter().map(frob_norm).product();
        let lhs = dist(&net.forward(&x), &net.forward(&y));
        prop_assert!(lhs <= lip * dist(&x, &y) * (1.0 + 1e-12) + 1e-14);
    }

    #[test]
    fn projection_lands_in_ball_and_is_idempotent(
        values in prop::collection::vec(-10.0f64..10.0, 12),
        bound in 0.01f64..20.0,
    ) {
        let w = DMatrix::from_row_slice(3, 4, &values);
        let p = frob_project(&w, bound);
        prop_assert!(frob_norm(&p) <= bound * (1.0 + 1e-12));
        prop_assert_eq!(frob_project(&p, bound), p.clone());
        if frob_norm(&w) <= bound {
            prop_assert_eq!(p, w);
        }
    }
}
