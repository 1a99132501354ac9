use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use quanta_core::analysis::{numerical_rank, subspace_similarity, DEFAULT_RANK_TOLERANCE};
use quanta_core::qtf::{QtfFile, QtfRecord};
use quanta_core::{
    build_plan, build_rect_plan, contract, gen_apply_expr, AdaptedLinear, AdapterForm, AxisShape, ContractOrder,
    DenseTensor, GateSpec, LoraAdapter, Matrix, PlanScheme, QuantaPlan,
};

fn shape_strategy(min_axes: usize, max_axes: usize) -> impl Strategy<Value = AxisShape> {
    prop::collection::vec(2usize..=3, min_axes..=max_axes).prop_map(|d| AxisShape::new(d).unwrap())
}

fn gaussian_vec(len: usize, seed: u64) -> Vec<f64> {
    Matrix::gaussian(1, len, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_vec()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(b) {
        prop_assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
    }
    Ok(())
}

fn gate_operand(g: &GateSpec, dims: (usize, usize), out: (usize, usize)) -> DenseTensor {
    let s = AxisShape::new(vec![out.0, out.1, dims.0, dims.1]).unwrap();
    DenseTensor::new(vec![], s, g.tensor.as_slice().to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn apply_is_linear(shape in shape_strategy(2, 4), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = build_plan(&shape, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        let d = shape.total();
        let x = gaussian_vec(d, seed ^ 1);
        let y = gaussian_vec(d, seed ^ 2);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let px = p.apply(&x).unwrap();
        let py = p.apply(&y).unwrap();
        let expect: Vec<f64> = px.iter().zip(&py).map(|(u, v)| a * u + b * v).collect();
        close(&p.apply(&mix).unwrap(), &expect, 1e-12)?;
    }

    #[test]
    fn expression_matches_sequential_apply(shape in shape_strategy(2, 5), seed in any::<u64>(), batch in 1usize..3) {
        let p = build_plan(&shape, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        let dims = shape.dims();
        let xs = gaussian_vec(batch * shape.total(), seed ^ 3);
        let x = DenseTensor::new(vec![batch], shape.clone(), xs.clone()).unwrap();
        let gates: Vec<DenseTensor> = p
            .gates()
            .iter()
            .map(|g| {
                let (m, n) = g.axes;
                gate_operand(g, (dims[m], dims[n]), (dims[m], dims[n]))
            })
            .collect();
        let mut ops = vec![&x];
        ops.extend(gates.iter());
        let expr = gen_apply_expr(shape.rank()).unwrap();
        for order in [ContractOrder::LeftToRight, ContractOrder::Greedy] {
            let via_expr = contract(&expr, &ops, order).unwrap();
            close(via_expr.data(), &p.apply(&xs).unwrap(), 1e-12)?;
        }
    }

    #[test]
    fn identity_gate_is_neutral(shape in shape_strategy(2, 4), seed in any::<u64>(), at in any::<prop::sample::Index>()) {
        let p = build_plan(&shape, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        let mut gates = p.gates().to_vec();
        let axes = gates[0].axes;
        let block = shape.dims()[axes.0] * shape.dims()[axes.1];
        gates.insert(at.index(gates.len() + 1), GateSpec::square(axes, Matrix::identity(block)));
        let q = QuantaPlan::new(shape.clone(), gates).unwrap();
        let x = gaussian_vec(shape.total(), seed ^ 4);
        prop_assert_eq!(q.apply(&x).unwrap(), p.apply(&x).unwrap());
    }

    #[test]
    fn io_lengths_slice_and_pad_the_square_operator(
        shape in shape_strategy(2, 3),
        seed in any::<u64>(),
        din in -2i64..=2,
        dout in -2i64..=2,
    ) {
        let p = build_plan(&shape, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        let d = shape.total() as i64;
        let (n_in, n_out) = ((d + din) as usize, (d + dout) as usize);
        let full = p.materialize();
        let q = p.with_io_lens(n_in, n_out).unwrap();
        let x = gaussian_vec(n_in, seed ^ 5);
        let expect: Vec<f64> = (0..n_out)
            .map(|i| if i < full.rows() { (0..n_in.min(full.cols())).map(|j| full.get(i, j) * x[j]).sum() } else { 0.0 })
            .collect();
        close(&q.apply(&x).unwrap(), &expect, 1e-12)?;
    }

    #[test]
    fn rectangular_plan_matches_its_operator(shape in shape_strategy(2, 3), out_first in 1usize..=5, seed in any::<u64>()) {
        let p = build_rect_plan(&shape, out_first, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        prop_assert_eq!(p.output_len(), shape.total() / shape.dims()[0] * out_first);
        let m = p.materialize();
        prop_assert_eq!(m.shape(), (p.output_len(), p.input_len()));
        let x = gaussian_vec(p.input_len(), seed ^ 6);
        close(&p.apply(&x).unwrap(), &m.matvec(&x).unwrap(), 1e-12)?;
    }

    #[test]
    fn merged_form_matches_three_term(shape in shape_strategy(2, 3), seed in any::<u64>(), nudge in -1.0f64..1.0) {
        let p = build_plan(&shape, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        let d = shape.total();
        let base = Matrix::gaussian(d, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 7));
        let mut merged = AdaptedLinear::new(base.clone(), &p, AdapterForm::Merged).unwrap();
        let mut three = AdaptedLinear::new(base, &p, AdapterForm::ThreeTerm).unwrap();
        for a in [&mut merged, &mut three] {
            a.plan_mut().gate_data_mut(0).unwrap()[0] += nudge;
        }
        let x = gaussian_vec(d, seed ^ 8);
        let y = three.forward(&x).unwrap();
        close(&merged.forward(&x).unwrap(), &y, 1e-10)?;
        close(&three.merge().unwrap().matvec(&x).unwrap(), &y, 1e-10)?;
    }

    #[test]
    fn qtf_round_trip(shape in shape_strategy(2, 4), seed in any::<u64>(), frozen in any::<bool>(), rank in 1usize..4) {
        let mut p = build_plan(&shape, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        if frozen {
            p = p.freeze();
        }
        let d = shape.total();
        let m = Matrix::gaussian(3, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let lora = LoraAdapter::new(d, 5, rank, 2.0 * rank as f64, seed);
        let file = QtfFile::new(vec![QtfRecord::Plan(p), QtfRecord::Matrix(m), QtfRecord::Lora(lora)]);
        let bytes = file.to_bytes().unwrap();
        let back = QtfFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn similarity_is_symmetric(seed in any::<u64>(), rows in 6usize..10, cols in 6usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Matrix::gaussian(rows, cols, 1.0, &mut rng);
        let w2 = Matrix::gaussian(rows + 1, cols, 1.0, &mut rng);
        let g12 = subspace_similarity(&w1, &w2, 4, 5).unwrap();
        let g21 = subspace_similarity(&w2, &w1, 5, 4).unwrap();
        for i in 1..=4 {
            for j in 1..=5 {
                let (a, b) = (g12.value(i, j).unwrap(), g21.value(j, i).unwrap());
                prop_assert!((a - b).abs() <= 1e-12, "phi({i},{j}) {a} vs {b}");
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
            }
        }
    }

    #[test]
    fn cost_matches_brute_force_count(shape in shape_strategy(2, 4), out_first in 1usize..=4, seed in any::<u64>()) {
        let p = build_rect_plan(&shape, out_first, &PlanScheme::AllPairs, seed, 1.0).unwrap();
        let report = p.cost();
        let mut current = shape.dims().to_vec();
        let mut flops = 0u64;
        let mut params = 0u64;
        for g in p.gates() {
            let (m, n) = g.axes;
            let (in_m, in_n) = (current[m], current[n]);
            let (out_m, out_n) = g.out_dims;
            let mut out_dims = current.clone();
            out_dims[m] = out_m;
            out_dims[n] = out_n;
            // One multiply-add per (output entry, input block entry).
            let out_entries: usize = out_dims.iter().product();
            for _ in 0..out_entries {
                for _ in 0..in_m * in_n {
                    flops += 1;
                }
            }
            params += (out_m * out_n * in_m * in_n) as u64;
            current = out_dims;
        }
        prop_assert_eq!(report.flops_per_token, flops);
        prop_assert_eq!(report.trainable_params, params);
        prop_assert_eq!(p.param_count() as u64, params);
    }

    #[test]
    fn invertible_gates_give_full_rank(shape in shape_strategy(2, 4), seed in any::<u64>(), rounds in 1usize..3) {
        let mut p = build_plan(&shape, &PlanScheme::Stacked { rounds }, seed, 1.0).unwrap();
        // Diagonally dominant gates.
        for k in 0..p.gate_count() {
            let n = (p.gates()[k].tensor.rows() as f64).sqrt();
            let cols = p.gates()[k].tensor.cols();
            let data = p.gate_data_mut(k).unwrap();
            for i in 0..cols {
                data[i * cols + i] += 4.0 * n * n;
            }
        }
        let report = numerical_rank(&p.materialize(), DEFAULT_RANK_TOLERANCE).unwrap();
        prop_assert_eq!(report.rank, shape.total());
    }
}
