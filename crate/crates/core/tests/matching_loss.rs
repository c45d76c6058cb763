//! Assignment exactness against brute force, box geometry and the training
//! objective.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smca::boxes::{giou, iou, BoxCxcywh};
use smca::data::Object;
use smca::decoder::Detections;
use smca::gradcheck::{finite_diff_check, GradCheckOptions};
use smca::loss::{focal_loss, matching_cost, total_loss, LossConfig};
use smca::matching::hungarian;
use smca::{Graph, ParamStore, Tensor};

/// Minimum over all injective maps of the smaller side into the larger.
fn brute_force(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                go(cost, rows, cols, r + 1, used, acc + cost[r * cols + c], best);
                used[c] = false;
            }
        }
    }
    let (t, r, c) = if rows <= cols {
        (cost.to_vec(), rows, cols)
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = cost[i * cols + j];
            }
        }
        (t, cols, rows)
    };
    let mut best = f64::INFINITY;
    go(&t, r, c, 0, &mut vec![false; c], 0.0, &mut best);
    best
}

fn check_assignment(cost: &[f64], rows: usize, cols: usize) -> (f64, f64) {
    let a = hungarian(cost, rows, cols).unwrap();
    assert_eq!(a.pairs.len(), rows.min(cols));
    let mut seen_r = vec![false; rows];
    let mut seen_c = vec![false; cols];
    for &(r, c) in &a.pairs {
        assert!(!seen_r[r] && !seen_c[c], "index repeated");
        seen_r[r] = true;
        seen_c[c] = true;
    }
    let recomputed: f64 = a.pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
    assert!((recomputed - a.total_cost).abs() <= 1e-9 * (1.0 + recomputed.abs()));
    (recomputed, brute_force(cost, rows, cols))
}

#[test]
fn hungarian_equals_brute_force_for_all_sizes_up_to_seven() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for rows in 1..=7 {
        for cols in 1..=7 {
            for trial in 0..100 {
                // Integer costs make the optimum exactly representable.
                let cost: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0..50) as f64).collect();
                let (got, want) = check_assignment(&cost, rows, cols);
                assert_eq!(got, want, "{rows}x{cols} trial {trial}");
                let cost: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let (got, want) = check_assignment(&cost, rows, cols);
                assert!(
                    (got - want).abs() <= 1e-12,
                    "{rows}x{cols} real trial {trial}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn hungarian_examples() {
    let big = 100.0;
    let cost = [0.0, big, big, big, 0.0, big, big, big, 0.0];
    assert_eq!(hungarian(&cost, 3, 3).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
    let a = hungarian(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
    assert_eq!((a.pairs, a.total_cost), (vec![(0, 0), (1, 1)], 2.0));
    assert!(hungarian(&[], 0, 3).unwrap().pairs.is_empty());
    assert!(hungarian(&[], 4, 0).unwrap().pairs.is_empty());
}

proptest! {
    #[test]
    fn constant_shift_keeps_the_assignment(
        rows in 1usize..7,
        cols in 1usize..7,
        seed in any::<u64>(),
        shift in -100.0f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0..1000) as f64).collect();
        let shifted: Vec<f64> = cost.iter().map(|c| c + shift.round()).collect();
        let a = hungarian(&cost, rows, cols).unwrap();
        let b = hungarian(&shifted, rows, cols).unwrap();
        // Ties may pick different pairs; the optimum value must agree.
        let val = |p: &[(usize, usize)]| p.iter().map(|&(r, c)| cost[r * cols + c]).sum::<f64>();
        prop_assert_eq!(val(&a.pairs), val(&b.pairs));
    }

    #[test]
    fn giou_is_symmetric_and_bounded(
        a in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0),
        b in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0),
    ) {
        let a = BoxCxcywh::new(a.0, a.1, a.2, a.3);
        let b = BoxCxcywh::new(b.0, b.1, b.2, b.3);
        let (ab, ba) = (giou(a, b), giou(b, a));
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!(ab <= iou(a, b) + 1e-12);
    }

    #[test]
    fn containment_makes_giou_equal_iou(
        outer in (0.3f64..0.7, 0.3f64..0.7, 0.2f64..0.5, 0.2f64..0.5),
        frac in (0.1f64..1.0, 0.1f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
    ) {
        let o = BoxCxcywh::new(outer.0, outer.1, outer.2, outer.3);
        let (w, h) = (o.w * frac.0, o.h * frac.1);
        let cx = o.cx - 0.5 * (o.w - w) + (o.w - w) * frac.2;
        let cy = o.cy - 0.5 * (o.h - h) + (o.h - h) * frac.3;
        let inner = BoxCxcywh::new(cx, cy, w, h);
        prop_assert!((giou(o, inner) - iou(o, inner)).abs() <= 1e-12);
    }
}

#[test]
fn giou_examples() {
    let a = BoxCxcywh::new(0.0, 0.0, 1.0, 1.0);
    let b = BoxCxcywh::new(2.0, 2.0, 1.0, 1.0);
    assert!((giou(a, b) + 7.0 / 9.0).abs() < 1e-15);
    assert_eq!(giou(a, a), 1.0);
    // Degenerate boxes stay finite.
    let z = BoxCxcywh::new(0.5, 0.5, 0.0, 0.0);
    assert!(giou(z, z).is_finite() && giou(z, a).is_finite());
}

#[test]
fn focal_limits() {
    assert!(focal_loss(40.0, 1.0, Some(0.25), 2.0) < 1e-30);
    assert!(focal_loss(-40.0, 0.0, Some(0.25), 2.0) < 1e-30);
    for z in [-3.0f64, -0.2, 0.0, 1.5] {
        let p: f64 = 1.0 / (1.0 + (-z).exp());
        assert!((focal_loss(z, 1.0, Some(1.0), 0.0) + p.ln()).abs() < 1e-12);
        assert!((focal_loss(z, 0.0, None, 0.0) + (1.0 - p).ln()).abs() < 1e-12);
        assert!((focal_loss(z, 1.0, None, 0.0) + p.ln()).abs() < 1e-12);
    }
    let p: f64 = 0.01;
    let z = (p / (1.0 - p)).ln();
    let want = 0.25 * 0.99f64.powi(2) * -(0.01f64.ln());
    assert!((focal_loss(z, 1.0, Some(0.25), 2.0) - want).abs() < 1e-12);
    assert!((want - 1.1285).abs() < 2e-4);
}

fn obj(class: usize, cx: f64, cy: f64, w: f64, h: f64) -> Object {
    Object {
        class,
        bbox: BoxCxcywh::new(cx, cy, w, h),
    }
}

#[test]
fn matching_cost_shape_and_minimum() {
    let cfg = LossConfig::default();
    let targets = [obj(0, 0.3, 0.3, 0.2, 0.2), obj(2, 0.7, 0.6, 0.3, 0.1)];
    let boxes = [0.3, 0.3, 0.2, 0.2, 0.5, 0.5, 0.4, 0.4, 0.7, 0.6, 0.3, 0.1];
    let logits = [8.0, -8.0, -8.0, 0.0, 0.0, 0.0, -8.0, -8.0, 8.0];
    let cost = matching_cost(&boxes, &logits, 3, &targets, &cfg);
    assert_eq!(cost.len(), 3 * 2);
    // The exact, confident predictions have the smallest entry per column.
    let col = |t: usize| (0..3).map(|q| cost[q * 2 + t]).collect::<Vec<_>>();
    let argmin = |v: Vec<f64>| v.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmin(col(0)), 0);
    assert_eq!(argmin(col(1)), 2);
    assert_eq!((cfg.cls_coef, cfg.l1_coef, cfg.giou_coef), (2.0, 5.0, 2.0));
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Parameters `raw_boxes` (pre-sigmoid) and `logits` for `q` queries.
fn free_predictions(q: usize, classes: usize, boxes: &[f64], logits: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    let raw: Vec<f64> = boxes.iter().map(|&b| logit(b)).collect();
    s.add("raw_boxes", Tensor::new(&[q, 4], raw).unwrap()).unwrap();
    s.add("logits", Tensor::new(&[q, classes], logits.to_vec()).unwrap())
        .unwrap();
    s
}

fn detections(g: &mut Graph, s: &ParamStore) -> Detections {
    let raw = g.param(s, s.find("raw_boxes").unwrap());
    let boxes = g.sigmoid(raw);
    let logits = g.param(s, s.find("logits").unwrap());
    Detections { boxes, logits }
}

#[test]
fn perfect_predictions_have_zero_box_losses_and_empty_scenes_have_none() {
    let cfg = LossConfig::default();
    let targets = [obj(1, 0.4, 0.5, 0.2, 0.3)];
    let store = free_predictions(
        2,
        3,
        &[0.4, 0.5, 0.2, 0.3, 0.8, 0.8, 0.1, 0.1],
        &[-9.0, 9.0, -9.0, -9.0, -9.0, -9.0],
    );
    let mut g = Graph::new();
    let det = detections(&mut g, &store);
    let out = total_loss(&mut g, &[det], &[&targets], &cfg).unwrap();
    let b = out.last();
    assert!(b.l1 < 1e-12 && b.giou < 1e-12, "{b:?}");
    assert_eq!(out.assignments[0][0].pairs, vec![(0, 0)]);
    assert!((b.total - (2.0 * b.cls + 5.0 * b.l1 + 2.0 * b.giou)).abs() < 1e-15);

    let mut g = Graph::new();
    let det = detections(&mut g, &store);
    let empty: [Object; 0] = [];
    let out = total_loss(&mut g, &[det], &[&empty], &cfg).unwrap();
    let b = out.last();
    assert_eq!((b.l1, b.giou), (0.0, 0.0));
    assert!(b.cls > 0.0);
}

#[test]
fn auxiliary_losses_cover_every_layer() {
    let targets = [obj(0, 0.4, 0.5, 0.2, 0.3)];
    let store = free_predictions(2, 3, &[0.4, 0.5, 0.2, 0.3, 0.6, 0.6, 0.3, 0.3], &[0.0; 6]);
    for (aux, layers) in [(true, 3), (false, 1)] {
        let cfg = LossConfig {
            aux_loss: aux,
            ..Default::default()
        };
        let mut g = Graph::new();
        let dets: Vec<Detections> = (0..3).map(|_| detections(&mut g, &store)).collect();
        let out = total_loss(&mut g, &dets, &[&targets], &cfg).unwrap();
        assert_eq!(out.per_layer.len(), layers);
        let sum: f64 = out.per_layer.iter().map(|b| b.total).sum();
        assert!((g.value(out.loss)[0] - sum).abs() < 1e-12);
    }
}

fn random_instance(rng: &mut ChaCha8Rng, q: usize, scenes: usize) -> (ParamStore, Vec<Vec<Object>>) {
    let boxes: Vec<f64> = (0..q * scenes * 4).map(|_| rng.gen_range(0.15..0.6)).collect();
    let logits: Vec<f64> = (0..q * scenes * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let targets = (0..scenes)
        .map(|s| {
            (0..s + 1)
                .map(|_| {
                    obj(
                        rng.gen_range(0..3),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.1..0.4),
                        rng.gen_range(0.1..0.4),
                    )
                })
                .collect()
        })
        .collect();
    (free_predictions(q * scenes, 3, &boxes, &logits), targets)
}

#[test]
fn total_loss_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut store, targets) = random_instance(&mut rng, 4, 2);
    let tr: Vec<&[Object]> = targets.iter().map(|t| t.as_slice()).collect();
    let cfg = LossConfig::default();
    let report = finite_diff_check(
        &mut store,
        |g, s| {
            let det = detections(g, s);
            Ok(total_loss(g, &[det], &tr, &cfg)?.loss)
        },
        &GradCheckOptions::default(),
        |_| true,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.summary());
}

#[test]
fn gradient_descent_decreases_the_loss_for_fifty_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut store, targets) = random_instance(&mut rng, 4, 2);
    let tr: Vec<&[Object]> = targets.iter().map(|t| t.as_slice()).collect();
    let cfg = LossConfig::default();
    let mut history = Vec::new();
    for _ in 0..60 {
        let mut g = Graph::new();
        let det = detections(&mut g, &store);
        let out = total_loss(&mut g, &[det], &tr, &cfg).unwrap();
        history.push(g.value(out.loss)[0]);
        g.backward(out.loss).unwrap();
        store.zero_grads();
        g.accumulate_param_grads(&mut store);
        for p in store.iter_mut() {
            let grad = p.tensor.grad.take().unwrap();
            for (v, d) in p.tensor.values_mut().iter_mut().zip(grad) {
                *v -= 0.01 * d;
            }
        }
    }
    for (k, w) in history.windows(2).enumerate() {
        assert!(w[1] < w[0], "step {k}: {} -> {}", w[0], w[1]);
    }
    assert!(history[59] < 0.8 * history[0]);
}
