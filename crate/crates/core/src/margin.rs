//! Maximum classification margin estimation over the feasible input domain
//! [0,1]^d via multi-restart projected gradient ascent, a brute-force grid
//! oracle for tiny inputs, and the directional overfitting diagnostics.
//!
//! The margin of class c at x is f_c(x) - max_{k != c} f_k(x). Ascent climbs
//! the bounded network's margin with the competing class re-resolved at every
//! step (subgradient of the pointwise max) and keeps the best iterate seen.
//! Steps have fixed length: the gradient is normalized so `step_size` is a
//! distance in input space, independent of the network's logit scale.

use crate::error::{Error, Result};
use crate::network::{BoundVectors, Network, WeightMode};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct AscentConfig {
    /// Gradient steps per ascent run.
    pub steps: usize,
    /// Fixed step size.
    pub step_size: f64,
    /// Number of independent restarts J_c.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { steps: 50, step_size: 0.1, restarts: 1, seed: 0 }
    }
}

/// One ascent result: the best point seen and its margin.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginEstimate {
    pub class: usize,
    pub point: Tensor,
    pub margin: f64,
    pub restart: usize,
    pub trace_len: usize,
    /// False when the run was aborted on a non-finite gradient.
    pub converged: bool,
}

/// Margin of class `c` and its input gradient at `x`, for the bounded
/// network. Returns (margin, competing class, gradient).
pub fn margin_and_grad(
    net: &Network,
    bounds: &BoundVectors,
    c: usize,
    x: &Tensor,
) -> Result<(f64, usize, Tensor)> {
    let mut g = Graph::new();
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xn = g.leaf(Tensor::new(shape, x.data().to_vec())?);
    let bn = net.bound_constants(&mut g, bounds)?;
    let build = net.build_graph(&mut g, xn, WeightMode::Constant, Some(&bn))?;
    let logits = g.value(build.logits).data().to_vec();
    let runner_up = competing_class(&logits, c);
    let m = logits[c] - logits[runner_up];

    let mut selector = vec![0.0; logits.len()];
    selector[c] = 1.0;
    selector[runner_up] = -1.0;
    let sel = g.constant(Tensor::new(vec![logits.len(), 1], selector)?);
    let m_node = g.matmul(build.logits, sel)?;
    let grads = g.backward(m_node)?;
    let grad = grads.get(xn).expect("input is a leaf");
    Ok((m, runner_up, Tensor::new(x.shape().to_vec(), grad.data().to_vec())?))
}

/// Margin of class `c` at `x` without gradients.
pub fn margin_value(net: &Network, bounds: &BoundVectors, c: usize, x: &Tensor) -> Result<f64> {
    let logits = net.bounded_forward(bounds, x)?;
    let row = logits.data();
    Ok(row[c] - row[competing_class(row, c)])
}

fn competing_class(logits: &[f64], c: usize) -> usize {
    let mut best = usize::MAX;
    for (k, v) in logits.iter().enumerate() {
        if k == c {
            continue;
        }
        if best == usize::MAX || *v > logits[best] {
            best = k;
        }
    }
    best
}

/// Projected gradient ascent from `x_init`, memoizing the best iterate, so
/// the returned margin is never below the margin at the starting point.
pub fn ascend_margin(
    net: &Network,
    bounds: &BoundVectors,
    c: usize,
    x_init: &Tensor,
    cfg: &AscentConfig,
) -> Result<MarginEstimate> {
    if x_init.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "ascend_margin",
            detail: format!("start point {:?} vs input {:?}", x_init.shape(), net.input_shape()),
        });
    }
    if x_init.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Margin("start point leaves [0,1]^d".to_string()));
    }
    let mut x = x_init.clone();
    let mut best_x = x.clone();
    let mut best_m = f64::NEG_INFINITY;
    let mut converged = true;
    let mut trace_len = 0;
    for step in 0..=cfg.steps {
        let (m, _, grad) = match margin_and_grad(net, bounds, c, &x) {
            Ok(v) => v,
            Err(_) => {
                converged = false;
                break;
            }
        };
        if m > best_m {
            best_m = m;
            best_x = x.clone();
        }
        if step == cfg.steps {
            break;
        }
        trace_len += 1;
        let gnorm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-12 {
            break; // flat region; nothing to climb
        }
        let scale = cfg.step_size / gnorm;
        let stepped: Vec<f64> = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(v, g)| (v + scale * g).clamp(0.0, 1.0))
            .collect();
        x = Tensor::new(x.shape().to_vec(), stepped)?;
    }
    Ok(MarginEstimate {
        class: c,
        point: best_x,
        margin: best_m,
        restart: 0,
        trace_len,
        converged,
    })
}

/// Uniform start point for restart `j` of class `c`; depends only on
/// (seed, c, j) so a larger restart count extends, never reshuffles, the set.
pub fn restart_point(net: &Network, c: usize, j: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "margin-start", c as u64, j as u64);
    let data: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(net.input_shape().to_vec(), data).expect("uniform draws are in range")
}

/// J_c independent restarts from uniform-random points, run in parallel and
/// returned sorted by descending margin.
pub fn estimate_class_margins(
    net: &Network,
    bounds: &BoundVectors,
    c: usize,
    cfg: &AscentConfig,
) -> Result<Vec<MarginEstimate>> {
    if cfg.restarts == 0 {
        return Err(Error::InvalidConfig("at least one restart is required".to_string()));
    }
    let mut estimates = (0..cfg.restarts)
        .into_par_iter()
        .map(|j| {
            let x0 = restart_point(net, c, j, cfg.seed);
            ascend_margin(net, bounds, c, &x0, cfg).map(|mut e| {
                e.restart = j;
                e
            })
        })
        .collect::<Result<Vec<_>>>()?;
    estimates.sort_by(|a, b| b.margin.total_cmp(&a.margin).then(a.restart.cmp(&b.restart)));
    Ok(estimates)
}

/// Exact maximum margin over a uniform grid on [0,1]^d; only feasible for
/// input dimension <= 3.
pub fn brute_force_margin(
    net: &Network,
    bounds: &BoundVectors,
    c: usize,
    grid_resolution: usize,
) -> Result<f64> {
    let dim = net.input_dim();
    if dim > 3 {
        return Err(Error::Margin(format!(
            "brute force over dimension {dim} is not feasible (max 3)"
        )));
    }
    if grid_resolution < 2 {
        return Err(Error::InvalidConfig("grid resolution must be >= 2".to_string()));
    }
    let steps = grid_resolution;
    let total = steps.pow(dim as u32);
    let classes = net.num_classes();
    let mut best = f64::NEG_INFINITY;
    let chunk = 2048;
    let mut idx = 0;
    while idx < total {
        let n = (total - idx).min(chunk);
        let mut data = Vec::with_capacity(n * dim);
        for p in idx..idx + n {
            let mut rem = p;
            for _ in 0..dim {
                data.push((rem % steps) as f64 / (steps - 1) as f64);
                rem /= steps;
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(net.input_shape());
        let logits = net.bounded_forward(bounds, &Tensor::new(shape, data)?)?;
        for row in logits.data().chunks(classes) {
            let m = row[c] - row[competing_class(row, c)];
            if m > best {
                best = m;
            }
        }
        idx += n;
    }
    Ok(best)
}

/// Directional overfitting statistic: the inner product of the trigger
/// pattern with the input gradient of the logit difference (target minus
/// source) at `x_s`.
pub fn directional_overfit_stat(
    net: &Network,
    bounds: Option<&BoundVectors>,
    delta: &Tensor,
    x_s: &Tensor,
    s: usize,
    t: usize,
) -> Result<f64> {
    if s == t {
        return Err(Error::Margin("source and target class must differ".to_string()));
    }
    let grad = logit_diff_grad(net, bounds, x_s, t, s)?;
    Ok(delta.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum())
}

/// Input gradient of logits[plus] - logits[minus] at x.
fn logit_diff_grad(
    net: &Network,
    bounds: Option<&BoundVectors>,
    x: &Tensor,
    plus: usize,
    minus: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xn = g.leaf(Tensor::new(shape, x.data().to_vec())?);
    let bn = match bounds {
        Some(b) => Some(net.bound_constants(&mut g, b)?),
        None => None,
    };
    let build = net.build_graph(&mut g, xn, WeightMode::Constant, bn.as_deref())?;
    let classes = net.num_classes();
    let mut selector = vec![0.0; classes];
    selector[plus] += 1.0;
    selector[minus] -= 1.0;
    let sel = g.constant(Tensor::new(vec![classes, 1], selector)?);
    let out = g.matmul(build.logits, sel)?;
    let grads = g.backward(out)?;
    Ok(Tensor::new(
        x.shape().to_vec(),
        grads.get(xn).expect("input is a leaf").data().to_vec(),
    )?)
}

/// Input gradient of a single logit at x.
pub fn logit_grad(
    net: &Network,
    bounds: Option<&BoundVectors>,
    x: &Tensor,
    c: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xn = g.leaf(Tensor::new(shape, x.data().to_vec())?);
    let bn = match bounds {
        Some(b) => Some(net.bound_constants(&mut g, b)?),
        None => None,
    };
    let build = net.build_graph(&mut g, xn, WeightMode::Constant, bn.as_deref())?;
    let classes = net.num_classes();
    let mut selector = vec![0.0; classes];
    selector[c] = 1.0;
    let sel = g.constant(Tensor::new(vec![classes, 1], selector)?);
    let out = g.matmul(build.logits, sel)?;
    let grads = g.backward(out)?;
    Ok(Tensor::new(
        x.shape().to_vec(),
        grads.get(xn).expect("input is a leaf").data().to_vec(),
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginFloor {
    /// Minimum margin over correctly classified training samples.
    pub tau: f64,
    pub correct: usize,
    pub total: usize,
}

impl MarginFloor {
    pub fn all_correct(&self) -> bool {
        self.correct == self.total
    }
}

/// Training-margin floor: the minimum of f_y(x) - max_{k != y} f_k(x) over
/// the correctly classified samples of `ds`.
pub fn margin_floor(net: &Network, ds: &crate::datagen::Dataset) -> Result<MarginFloor> {
    if ds.is_empty() {
        return Err(Error::InvalidDataset("margin_floor requires a nonempty dataset".to_string()));
    }
    let classes = net.num_classes();
    let mut tau = f64::INFINITY;
    let mut correct = 0usize;
    for chunk in ds.samples().chunks(256) {
        let dim: usize = ds.input_shape().iter().product();
        let mut data = Vec::with_capacity(chunk.len() * dim);
        for s in chunk {
            data.extend_from_slice(s.x.data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(ds.input_shape());
        let logits = net.forward(&Tensor::new(shape, data)?)?;
        for (i, s) in chunk.iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let m = row[s.label] - row[competing_class(row, s.label)];
            if m > 0.0 {
                correct += 1;
                if m < tau {
                    tau = m;
                }
            }
        }
    }
    if correct == 0 {
        return Err(Error::Margin("no correctly classified samples".to_string()));
    }
    Ok(MarginFloor { tau, correct, total: ds.len() })
}

/// Per-class logit preservation: mean squared error between bounded and
/// original logits on the clean set, and the mean ratio of input-gradient
/// norms for the own-class logit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPreservation {
    pub per_class_mse: Vec<f64>,
    pub grad_norm_ratio: Vec<f64>,
}

pub fn logit_preservation_report(
    net: &Network,
    bounds: &BoundVectors,
    clean: &crate::datagen::CleanSet,
) -> Result<LogitPreservation> {
    let classes = clean.num_classes();
    let mut per_class_mse = Vec::with_capacity(classes);
    let mut grad_norm_ratio = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut mse = 0.0;
        let mut ratio_sum = 0.0;
        let mut ratio_n = 0usize;
        for x in clean.class(c) {
            let orig = net.forward(x)?;
            let clipped = net.bounded_forward(bounds, x)?;
            mse += orig
                .data()
                .iter()
                .zip(clipped.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / classes as f64;
            let g_orig = logit_grad(net, None, x, c)?;
            let g_clip = logit_grad(net, Some(bounds), x, c)?;
            let n_orig = norm(g_orig.data());
            if n_orig > 1e-12 {
                ratio_sum += norm(g_clip.data()) / n_orig;
                ratio_n += 1;
            }
        }
        per_class_mse.push(mse / clean.per_class_count() as f64);
        grad_norm_ratio.push(if ratio_n == 0 { 1.0 } else { ratio_sum / ratio_n as f64 });
    }
    Ok(LogitPreservation { per_class_mse, grad_norm_ratio })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{presets, Activation, LayerKind, LayerSpec, LayerWeights, EPS_Z};

    fn linear_net(w: [[f64; 2]; 2]) -> Network {
        // logits = W^T x on [0,1]^2, two classes
        let layers = vec![LayerSpec {
            kind: LayerKind::Dense { input: 2, output: 2 },
            activation: Activation::None,
            clippable: false,
        }];
        let weights = vec![LayerWeights::Dense {
            w: Tensor::new(vec![2, 2], vec![w[0][0], w[0][1], w[1][0], w[1][1]]).unwrap(),
            b: Tensor::zeros(vec![2]),
        }];
        Network::new(layers, weights, vec![2]).unwrap()
    }

    #[test]
    fn linear_margin_ascent_reaches_the_best_vertex() {
        // margin of class 0 is (w0 - w1) . x; maximizer is a box vertex
        let net = linear_net([[2.0, -1.0], [0.5, 1.0]]);
        let bounds = BoundVectors::unbounded(&net);
        let cfg = AscentConfig { steps: 100, step_size: 0.1, restarts: 1, seed: 0 };
        let est = ascend_margin(&net, &bounds, 0, &Tensor::vector(&[0.5, 0.5]).unwrap(), &cfg).unwrap();
        // vertices of the box, enumerated
        let best_vertex = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]
            .iter()
            .map(|v| {
                let l = net.forward(&Tensor::vector(v).unwrap()).unwrap();
                l.data()[0] - l.data()[1]
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((est.margin - best_vertex).abs() < 1e-9, "{} vs {best_vertex}", est.margin);
    }

    #[test]
    fn ascent_never_returns_a_worse_point() {
        let net = presets::mlp3(4, 3, 5);
        let bounds = BoundVectors::unbounded(&net);
        let x0 = Tensor::vector(&[0.2, 0.8, 0.5, 0.1]).unwrap();
        let m0 = margin_value(&net, &bounds, 1, &x0).unwrap();
        let cfg = AscentConfig { steps: 25, step_size: 0.1, restarts: 1, seed: 0 };
        let est = ascend_margin(&net, &bounds, 1, &x0, &cfg).unwrap();
        assert!(est.margin >= m0);
        // self-consistency: stored margin equals margin recomputed at x*
        let again = margin_value(&net, &bounds, 1, &est.point).unwrap();
        assert!((again - est.margin).abs() < 1e-9);
        // projection invariant
        assert!(est.point.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn collapsed_bounds_collapse_the_margin() {
        let net = presets::mlp3(4, 3, 6);
        let wide = BoundVectors::unbounded(&net);
        let tiny = BoundVectors::collapsed(&net);
        let cfg = AscentConfig { steps: 40, step_size: 0.1, restarts: 4, seed: 3 };
        let open = estimate_class_margins(&net, &wide, 0, &cfg).unwrap()[0].margin;
        let shut = estimate_class_margins(&net, &tiny, 0, &cfg).unwrap()[0].margin;
        // with all bounds at the floor the net is nearly constant; its margin
        // cannot exceed the unclipped maximum
        assert!(shut <= open + 1e-9);
        let constant_level = {
            // logits when every clipped activation equals its floor bound
            let x = Tensor::vector(&[0.0, 0.0, 0.0, 0.0]).unwrap();
            let l = net.bounded_forward(&tiny, &x).unwrap();
            let row = l.data();
            let c = 0;
            row[c] - row[competing_class(row, c)]
        };
        assert!((shut - constant_level).abs() < 0.5, "{shut} vs {constant_level}");
    }

    #[test]
    fn restart_list_is_sorted_and_superset_monotone() {
        let net = presets::mlp3(3, 3, 8);
        let bounds = BoundVectors::unbounded(&net);
        let short = AscentConfig { steps: 10, step_size: 0.1, restarts: 2, seed: 4 };
        let long = AscentConfig { restarts: 6, ..short.clone() };
        let few = estimate_class_margins(&net, &bounds, 1, &short).unwrap();
        let many = estimate_class_margins(&net, &bounds, 1, &long).unwrap();
        assert!(few.windows(2).all(|w| w[0].margin >= w[1].margin));
        assert!(many[0].margin >= few[0].margin);
        // single restart equals a bare ascend from the same start
        let single_cfg = AscentConfig { restarts: 1, ..short.clone() };
        let single = estimate_class_margins(&net, &bounds, 1, &single_cfg).unwrap();
        let direct = ascend_margin(&net, &bounds, 1, &restart_point(&net, 1, 0, 4), &short).unwrap();
        assert_eq!(single[0].margin, direct.margin);
    }

    #[test]
    fn brute_force_on_constant_logits_is_zero() {
        // zero weights -> all logits equal -> margin 0 everywhere
        let net = linear_net([[0.0, 0.0], [0.0, 0.0]]);
        let bounds = BoundVectors::unbounded(&net);
        let m = brute_force_margin(&net, &bounds, 0, 11).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn brute_force_grid_refinement_only_improves() {
        let net = presets::mlp3(2, 3, 12);
        let bounds = BoundVectors::unbounded(&net);
        let coarse = brute_force_margin(&net, &bounds, 2, 11).unwrap();
        let fine = brute_force_margin(&net, &bounds, 2, 101).unwrap();
        // the 11-point grid lattice is a subset of the 101-point lattice
        assert!(coarse <= fine + 1e-12);
    }

    #[test]
    fn brute_force_rejects_high_dimension() {
        let net = presets::mlp3(4, 2, 0);
        let bounds = BoundVectors::unbounded(&net);
        assert!(brute_force_margin(&net, &bounds, 0, 11).is_err());
    }

    #[test]
    fn ascent_tracks_the_grid_oracle_on_a_2d_fixture() {
        let net = presets::mlp3(2, 3, 21);
        let bounds = BoundVectors::unbounded(&net);
        for c in 0..3 {
            let oracle = brute_force_margin(&net, &bounds, c, 101).unwrap();
            let cfg = AscentConfig { steps: 300, step_size: 0.02, restarts: 10, seed: 2 };
            let est = estimate_class_margins(&net, &bounds, c, &cfg).unwrap()[0].margin;
            assert!(
                est >= oracle - 0.01 * oracle.abs().max(1e-6),
                "class {c}: ascent {est} vs grid {oracle}"
            );
        }
    }

    #[test]
    fn zero_delta_has_zero_directional_stat() {
        let net = presets::mlp3(4, 3, 3);
        let x = Tensor::vector(&[0.4, 0.2, 0.9, 0.5]).unwrap();
        let d = Tensor::zeros(vec![4]);
        assert_eq!(directional_overfit_stat(&net, None, &d, &x, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn linear_network_directional_stat_is_weight_difference() {
        let net = linear_net([[2.0, -1.0], [0.5, 1.0]]);
        let delta = Tensor::vector(&[0.01, -0.02]).unwrap();
        // d(f_t - f_s)/dx = w_t - w_s, independent of x
        let expect = 0.01 * (-1.0 - 2.0) + (-0.02) * (1.0 - 0.5);
        for x in [[0.1, 0.9], [0.7, 0.3]] {
            let v = directional_overfit_stat(&net, None, &delta, &Tensor::vector(&x).unwrap(), 0, 1)
                .unwrap();
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_floor_on_a_separated_toy_is_positive() {
        use crate::datagen::{synth_classes, DataGeometry};
        use crate::trainer::{train, TrainConfig};
        let ds = synth_classes(2, DataGeometry::Vector { dim: 6 }, 30, 12.0, 4).unwrap();
        let net = presets::mlp3(6, 2, 1);
        let out = train(&net, &ds, None, &TrainConfig { epochs: 30, ..Default::default() }).unwrap();
        let floor = margin_floor(&out.network, &ds).unwrap();
        assert!(floor.all_correct());
        assert!(floor.tau > 0.0);
        // oracle: direct scan over recomputed margins
        let mut min_m = f64::INFINITY;
        for s in ds.samples() {
            let l = out.network.forward(&s.x).unwrap();
            let row = l.data();
            let m = row[s.label] - row[1 - s.label];
            if m > 0.0 {
                min_m = min_m.min(m);
            }
        }
        assert!((floor.tau - min_m).abs() < 1e-12);
    }

    #[test]
    fn margin_floor_excludes_misclassified_duplicates() {
        use crate::datagen::{Dataset, Sample};
        let net = linear_net([[1.0, 0.0], [0.0, 1.0]]);
        let x = Tensor::vector(&[0.9, 0.1]).unwrap();
        let samples = vec![
            Sample { x: x.clone(), label: 0, poisoned: false },
            Sample { x, label: 1, poisoned: false }, // same point, other label
        ];
        let ds = Dataset::new(samples, vec![2], 2).unwrap();
        let floor = margin_floor(&net, &ds).unwrap();
        assert_eq!(floor.correct, 1);
        assert!(!floor.all_correct());
    }

    #[test]
    fn identity_bounds_preserve_logits_and_gradients() {
        use crate::datagen::{split_clean_set, synth_classes, DataGeometry};
        let ds = synth_classes(3, DataGeometry::Vector { dim: 5 }, 10, 4.0, 2).unwrap();
        let (clean, _) = split_clean_set(&ds, 5, 0).unwrap();
        let net = presets::mlp3(5, 3, 2);
        let bounds = BoundVectors::unbounded(&net);
        let rep = logit_preservation_report(&net, &bounds, &clean).unwrap();
        for (mse, ratio) in rep.per_class_mse.iter().zip(&rep.grad_norm_ratio) {
            assert_eq!(*mse, 0.0);
            assert!((ratio - 1.0).abs() < 1e-12);
        }
        // collapsed bounds shrink gradients
        let tiny = BoundVectors::collapsed(&net);
        let rep2 = logit_preservation_report(&net, &tiny, &clean).unwrap();
        for ratio in &rep2.grad_norm_ratio {
            assert!(*ratio <= 1.0 + 1e-12);
        }
        assert!(rep2.per_class_mse.iter().sum::<f64>() > rep.per_class_mse.iter().sum::<f64>());
    }

    #[test]
    fn collapsed_bound_floor_is_respected() {
        let net = presets::mlp3(4, 2, 9);
        let tiny = BoundVectors::collapsed(&net);
        for (_, z) in tiny.entries() {
            assert!(z.iter().all(|&v| v == EPS_Z));
        }
    }
}
