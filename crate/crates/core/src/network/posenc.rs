//! Fixed 2-D sine positional encoding of the feature grid.

/// `[height * width, dim]` table; the first half encodes rows, the second columns.
pub fn sine_2d(height: usize, width: usize, dim: usize) -> Vec<f64> {
    assert_eq!(dim % 4, 0, "sine encoding needs dim divisible by 4");
    let feats = dim / 2;
    let temperature: f64 = 10_000.0;
    let scale = 2.0 * std::f64::consts::PI;
    let eps = 1e-6;
    let freq: Vec<f64> =
        (0..feats).map(|k| temperature.powf(2.0 * (k / 2) as f64 / feats as f64)).collect();
    let mut out = vec![0.0; height * width * dim];
    for y in 0..height {
        let ye = (y + 1) as f64 / (height as f64 + eps) * scale;
        for x in 0..width {
            let xe = (x + 1) as f64 / (width as f64 + eps) * scale;
            let row = &mut out[(y * width + x) * dim..(y * width + x + 1) * dim];
            for k in 0..feats {
                let (vy, vx) = (ye / freq[k], xe / freq[k]);
                if k % 2 == 0 {
                    row[k] = vy.sin();
                    row[feats + k] = vx.sin();
                } else {
                    row[k] = vy.cos();
                    row[feats + k] = vx.cos();
                }
            }
        }
    }
    out
}
