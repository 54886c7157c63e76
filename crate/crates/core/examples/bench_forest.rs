use txcast::learners::{rf_train, ForestParams, FeatureMatrix};
fn main() {
    let n = 2000usize;
    let d = 29usize;
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut state = 12345u64;
    let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 11) as f64 / (1u64 << 53) as f64 };
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| (next() * 4.0).floor()).collect();
        let t = 0.5 + 0.1 * row[0] - 0.1 * row[1] + 0.05 * (next() - 0.5);
        rows.push(row);
        y.push(t.clamp(0.0, 1.0));
    }
    let x = FeatureMatrix::from_rows(&rows).unwrap();
    let params = ForestParams { n_trees: std::env::var("NT").ok().and_then(|v| v.parse().ok()).unwrap_or(300), ..ForestParams::default() };
    let t0 = std::time::Instant::now();
    let model = rf_train(&x, &y, &[], &params, 7).unwrap();
    let dt = t0.elapsed();
    println!("300 trees, n={n}, d={d}: {:?} ({:.2} ms/tree)", dt, dt.as_secs_f64()*1000.0/300.0);
    let preds = model.predict(&x).unwrap();
    println!("pred[0..3] = {:?}", &preds[..3]);
}
