use casal_core::metrics::*;
use casal_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tok(t: &[u32]) -> Completion {
    t.to_vec().into()
}

fn text(s: &str) -> Completion {
    Completion {
        tokens: Vec::new(),
        text: Some(s.to_string()),
    }
}

#[test]
fn token_mode_rates() {
    let m = AbstainMatcher::Token(2);
    let all: Vec<Completion> = (0..8).map(|_| tok(&[2, 1])).collect();
    let none: Vec<Completion> = (0..8).map(|_| tok(&[7, 2])).collect();
    assert_eq!(refusal_rate(&all, &m).unwrap(), 1.0);
    assert_eq!(refusal_rate(&none, &m).unwrap(), 0.0);
    assert_eq!(hallucination_rate(&all, &m).unwrap(), 0.0);
    assert_eq!(hallucination_rate(&none, &m).unwrap(), 1.0);
    let mixed: Vec<Completion> = (0..8).map(|i| if i < 3 { tok(&[2]) } else { tok(&[5]) }).collect();
    assert_eq!(refusal_rate(&mixed, &m).unwrap(), 0.375);
    let unknown: Vec<Completion> = (0..20).map(|i| if i % 4 == 0 { tok(&[2]) } else { tok(&[9]) }).collect();
    assert_eq!(hallucination_rate(&unknown, &m).unwrap(), 0.75);
    assert!(refusal_rate(&[], &m).is_err());
}

#[test]
fn lexicon_matching_is_case_insensitive() {
    let m = AbstainMatcher::default_lexicon();
    assert!(m.matches(&text("Sorry, I Don't Know that one.")));
    assert!(!m.matches(&text("Paris")));
    assert!(!m.matches(&tok(&[1, 2])));
}

#[test]
fn accuracy_modes() {
    let answers: Vec<Completion> = (0..10).map(|i| tok(&[i, 1])).collect();
    assert_eq!(accuracy(&answers, &answers, MatchMode::Token).unwrap(), 1.0);
    let got: Vec<Completion> = (0..10).map(|i| if i < 7 { tok(&[i, 1]) } else { tok(&[0]) }).collect();
    assert!((accuracy(&got, &answers, MatchMode::Token).unwrap() - 0.7).abs() < 1e-15);
    let c = [text("The capital is PARIS, of course")];
    let t = [text("paris")];
    assert_eq!(accuracy(&c, &t, MatchMode::Substring).unwrap(), 1.0);
    assert!(accuracy(&c, &[], MatchMode::Token).is_err());
}

/// Textbook double loop.
fn brute_silhouette(p: &[Vec<f64>], labels: &[bool]) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..p.len() {
        let (mut same, mut ns, mut other, mut no) = (0.0, 0, 0.0, 0);
        for j in 0..p.len() {
            if i == j {
                continue;
            }
            if labels[j] == labels[i] {
                same += d(&p[i], &p[j]);
                ns += 1;
            } else {
                other += d(&p[i], &p[j]);
                no += 1;
            }
        }
        let a = same / ns as f64;
        let b = other / no as f64;
        total += (b - a) / a.max(b);
    }
    total / p.len() as f64
}

#[test]
fn silhouette_matches_brute_force() {
    let pts = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.5],
        vec![0.3, 2.0],
        vec![4.0, 4.0],
        vec![5.0, 3.5],
        vec![3.0, 5.5],
    ];
    let labels = [true, true, true, false, false, false];
    let s = silhouette(&Matrix::from_rows(&pts).unwrap(), &labels).unwrap();
    assert!((s - brute_silhouette(&pts, &labels)).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let labels: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let s = silhouette(&Matrix::from_rows(&pts).unwrap(), &labels).unwrap();
    assert!((s - brute_silhouette(&pts, &labels)).abs() < 1e-12);
}

#[test]
fn silhouette_limits() {
    let e = 1e-6;
    let pts = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, e], vec![10.0, 0.0], vec![10.0, e]]).unwrap();
    assert!(silhouette(&pts, &[true, true, false, false]).unwrap() >= 0.999);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cloud: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let labels: Vec<bool> = (0..200).map(|i| (i * 7919) % 2 == 0).collect();
    assert!(silhouette(&Matrix::from_rows(&cloud).unwrap(), &labels).unwrap().abs() < 0.2);
    assert!(silhouette(&pts, &[true, true, true, true]).is_err());
}

#[test]
fn spearman_and_standard_errors() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[8.0, 6.0, 4.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    // ties get average ranks
    let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((r - 0.9486832980505138).abs() < 1e-12);
    assert!((binomial_se(0.5, 100) - 0.05).abs() < 1e-15);
    assert_eq!(binomial_se(0.0, 10), 0.0);
}

#[test]
fn metrics_csv_layout() {
    let row = MetricsRow {
        run_id: "casal".into(),
        split: "heldout".into(),
        n_known: 60,
        n_unknown: 40,
        halluc: 0.25,
        refusal: 0.0,
        acc: 0.9,
        silhouette: None,
    };
    let csv = metrics_csv(&[row]);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields[..3], ["casal", "heldout", "100"]);
    assert_eq!(fields[6], "");
    let se: f64 = fields[7].parse().unwrap();
    assert!((se - (0.25f64 * 0.75 / 40.0).sqrt()).abs() < 1e-6);
}
