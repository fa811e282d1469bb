use morphscope::metrics::{bpcer_at_macer, d_eer, det_curve, error_rates, threshold_sweep, LabeledScores};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every midpoint between distinct pooled scores plus both infinities,
/// with rates counted directly (morph iff score ≥ t).
fn brute_force_points(s: &LabeledScores) -> Vec<(f64, f64)> {
    let mut all: Vec<f64> = s.bona.iter().chain(&s.morph).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut ts = vec![f64::NEG_INFINITY];
    ts.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    ts.push(f64::INFINITY);
    ts.iter()
        .map(|&t| {
            let bpcer = s.bona.iter().filter(|&&v| v >= t).count() as f64 / s.bona.len() as f64;
            let macer = s.morph.iter().filter(|&&v| v < t).count() as f64 / s.morph.len() as f64;
            (bpcer, macer)
        })
        .collect()
}

fn oracle_eer(s: &LabeledScores) -> f64 {
    let best = brute_force_points(s)
        .into_iter()
        .min_by(|a, b| (a.0 - a.1).abs().total_cmp(&(b.0 - b.1).abs()))
        .unwrap();
    50.0 * (best.0 + best.1)
}

/// Size of the staircase step where `BPCER − MACER` changes sign, in percent.
/// Tied scores make a single step span several `1/n` increments.
fn crossing_step(s: &LabeledScores) -> f64 {
    let pts = brute_force_points(s);
    let k = pts.iter().position(|(b, m)| b - m <= 0.0).unwrap();
    if k == 0 {
        return 0.0;
    }
    let ((b0, m0), (b1, m1)) = (pts[k - 1], pts[k]);
    100.0 * (b0 - b1).max(m1 - m0)
}

fn oracle_bpcer_at(s: &LabeledScores, target_percent: f64) -> f64 {
    100.0
        * brute_force_points(s)
            .into_iter()
            .filter(|&(_, m)| 100.0 * m <= target_percent + 1e-9)
            .map(|(b, _)| b)
            .fold(f64::INFINITY, f64::min)
}

fn random_scores(rng: &mut ChaCha8Rng) -> LabeledScores {
    let nb = rng.random_range(1..=50);
    let nm = rng.random_range(1..=50);
    let shift = rng.random_range(-1.0..3.0);
    // Coarse grids create ties within and across classes.
    let quantum = [0.0, 0.1, 0.5][rng.random_range(0..3)];
    let mut draw = |mu: f64| {
        let v: f64 = mu + rng.random_range(-2.0..2.0);
        if quantum > 0.0 { (v / quantum).round() * quantum } else { v }
    };
    let bona = (0..nb).map(|_| draw(0.0)).collect();
    let morph = (0..nm).map(|_| draw(shift)).collect();
    LabeledScores::new(bona, morph)
}

#[test]
fn thousand_random_instances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let s = random_scores(&mut rng);
        let step = crossing_step(&s);
        let tie_free = {
            let mut all: Vec<f64> = s.bona.iter().chain(&s.morph).copied().collect();
            let n = all.len();
            all.sort_by(f64::total_cmp);
            all.dedup();
            all.len() == n
        };
        if tie_free {
            assert!(step <= 100.0 * s.step() + 1e-9);
        }
        let eer = d_eer(&s).unwrap();
        let want = oracle_eer(&s);
        assert!((eer - want).abs() <= step + 1e-9, "case {case}: d_eer {eer} vs oracle {want} (step {step})");
        assert!((0.0..=100.0).contains(&eer));
        for target in [0.0, 5.0, 10.0, 37.5, 100.0] {
            let got = bpcer_at_macer(&s, target).unwrap();
            let want = oracle_bpcer_at(&s, target);
            assert!((got - want).abs() <= 1e-9, "case {case}: BPCER@{target} {got} vs {want}");
        }
        assert!(bpcer_at_macer(&s, 10.0).unwrap() <= bpcer_at_macer(&s, 5.0).unwrap());

        // Monotone staircase, exactly.
        let sweep = threshold_sweep(&s).unwrap();
        for w in sweep.windows(2) {
            assert!(w[1].threshold > w[0].threshold);
            assert!(w[1].bpcer <= w[0].bpcer);
            assert!(w[1].macer >= w[0].macer);
        }
        let first = sweep.first().unwrap();
        let last = sweep.last().unwrap();
        assert_eq!((first.bpcer, first.macer), (1.0, 0.0));
        assert_eq!((last.bpcer, last.macer), (0.0, 1.0));
        for p in &sweep {
            assert_eq!(error_rates(&s, p.threshold).unwrap(), (p.bpcer, p.macer));
        }
        let det = det_curve(&s).unwrap();
        for w in det.points.windows(2) {
            assert!(w[1].0 > w[0].0 && w[1].1 <= w[0].1);
        }
    }
}

#[test]
fn worked_four_by_four_example() {
    let s = LabeledScores::new(vec![0.1, 0.2, 0.3, 0.4], vec![0.25, 0.35, 0.45, 0.55]);
    assert_eq!(error_rates(&s, 0.35).unwrap(), (0.25, 0.25));
    assert_eq!(d_eer(&s).unwrap(), 25.0);
    assert_eq!(bpcer_at_macer(&s, 25.0).unwrap(), 25.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn increasing_transforms_preserve_metrics(
        bona in prop::collection::vec(-5.0f64..5.0, 1..40),
        morph in prop::collection::vec(-5.0f64..5.0, 1..40),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let s = LabeledScores::new(bona.clone(), morph.clone());
        let f = |v: &f64| a * v + b;
        let t = LabeledScores::new(bona.iter().map(f).collect(), morph.iter().map(f).collect());
        let step = crossing_step(&s);
        prop_assert!((d_eer(&s).unwrap() - d_eer(&t).unwrap()).abs() <= step + 1e-9);
        prop_assert!((bpcer_at_macer(&s, 5.0).unwrap() - bpcer_at_macer(&t, 5.0).unwrap()).abs() <= 1e-9);
        let g = |v: &f64| v.exp();
        let u = LabeledScores::new(bona.iter().map(g).collect(), morph.iter().map(g).collect());
        prop_assert!((bpcer_at_macer(&s, 10.0).unwrap() - bpcer_at_macer(&u, 10.0).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn outputs_are_percentages(
        bona in prop::collection::vec(-1e3f64..1e3, 1..30),
        morph in prop::collection::vec(-1e3f64..1e3, 1..30),
    ) {
        let s = LabeledScores::new(bona, morph);
        for v in [d_eer(&s).unwrap(), bpcer_at_macer(&s, 5.0).unwrap(), bpcer_at_macer(&s, 10.0).unwrap()] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }
}
