use coffee_core::rng::substream;
use coffee_core::world::{choose_item, generate_world, history_scores, true_click_probability, Dataset, WorldConfig};

/// Pearson χ² statistic of observed counts against a uniform expectation.
fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

fn draw_counts(beta: f64, items: usize, draws: usize) -> Vec<usize> {
    let mut rng = substream(9, "chi-square");
    let intent = [1.0, 0.0, 0.0];
    let affinities: Vec<Vec<f64>> = (0..items)
        .map(|i| {
            let a = i as f64 / items as f64 * std::f64::consts::TAU;
            vec![a.cos(), a.sin(), 0.0]
        })
        .collect();
    let mut counts = vec![0; items];
    for _ in 0..draws {
        counts[choose_item(&intent, affinities.iter().map(Vec::as_slice), beta, &mut rng)] += 1;
    }
    counts
}

// 99.9th percentile of χ² with 49 degrees of freedom.
const CHI2_49_999: f64 = 85.35;

#[test]
fn zero_beta_item_choice_is_uniform() {
    let counts = draw_counts(0.0, 50, 100_000);
    let chi2 = chi_square_uniform(&counts);
    assert!(chi2 < CHI2_49_999, "chi2 {chi2}");
}

#[test]
fn positive_beta_item_choice_is_not_uniform() {
    let counts = draw_counts(2.0, 50, 100_000);
    assert!(chi_square_uniform(&counts) > 10.0 * CHI2_49_999);
    assert!(counts[0] > counts[25]);
}

fn default_dataset() -> (coffee_core::world::World, Dataset) {
    let world = generate_world(&WorldConfig::default(), 42).unwrap();
    let data = Dataset::simulate(&world).unwrap();
    (world, data)
}

#[test]
fn empirical_ctr_matches_analytic_probability() {
    let (world, data) = default_dataset();
    let sample = &data.examples[..10_000];
    let analytic: f64 = sample
        .iter()
        .map(|ex| true_click_probability(&world, &data.histories, &ex.request()).unwrap())
        .sum::<f64>()
        / sample.len() as f64;
    let empirical = sample.iter().filter(|ex| ex.label == 1).count() as f64 / sample.len() as f64;
    assert!((empirical - analytic).abs() < 0.02, "empirical {empirical} analytic {analytic}");
}

/// Mutual information (nats) between a binary label and a score cut into
/// equal-frequency bins.
fn binned_mutual_information(scores: &[f64], labels: &[u8], bins: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = scores.len() as f64;
    let mut joint = vec![[0.0f64; 2]; bins];
    for (rank, &i) in order.iter().enumerate() {
        joint[rank * bins / scores.len()][labels[i] as usize] += 1.0;
    }
    let p1 = labels.iter().filter(|&&y| y == 1).count() as f64 / n;
    let py = [1.0 - p1, p1];
    let mut mi = 0.0;
    for row in &joint {
        let pb = (row[0] + row[1]) / n;
        for y in 0..2 {
            let pj = row[y] / n;
            if pj > 0.0 {
                mi += pj * (pj / (pb * py[y])).ln();
            }
        }
    }
    mi
}

#[test]
fn label_carries_more_information_about_ad_history_than_organic() {
    let (world, data) = default_dataset();
    assert!(data.examples.len() >= 100_000);
    let scores: Vec<_> = data
        .examples
        .iter()
        .map(|ex| history_scores(&world, &data.histories, &ex.request()).unwrap())
        .collect();
    let labels: Vec<u8> = data.examples.iter().map(|ex| ex.label).collect();
    let s_ad: Vec<f64> = scores.iter().map(|s| s.s_ad).collect();
    let s_org: Vec<f64> = scores.iter().map(|s| s.s_org).collect();
    let mi_ad = binned_mutual_information(&s_ad, &labels, 20);
    let mi_org = binned_mutual_information(&s_org, &labels, 20);
    assert!(mi_ad > mi_org, "MI(s_ad) {mi_ad} <= MI(s_org) {mi_org}");
}

#[test]
fn mutual_information_oracle_cases() {
    let labels: Vec<u8> = (0..1000).map(|i| u8::from(i >= 500)).collect();
    let perfect: Vec<f64> = (0..1000).map(f64::from).collect();
    assert!((binned_mutual_information(&perfect, &labels, 10) - std::f64::consts::LN_2).abs() < 1e-12);
    let useless: Vec<f64> = (0..1000).map(|i| f64::from(i % 2)).collect();
    let alternating: Vec<u8> = (0..1000).map(|i| u8::from(i % 4 < 2)).collect();
    assert!(binned_mutual_information(&useless, &alternating, 2).abs() < 1e-12);
}
