use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Median filter with edge replication plus, for each output pixel, the flat
/// index of the input pixel its value was taken from.
///
/// When several window entries equal the median the lowest flat index wins,
/// which makes the routing a deterministic subgradient of the order statistic.
pub fn median_filter_routed(img: &ImageGrid, k: usize) -> Result<(ImageGrid, Vec<usize>)> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "median kernel must be odd and at least 1, got {k}"
        )));
    }
    let (h, w) = img.shape();
    let r = (k / 2) as isize;
    let mid = k * k / 2;
    let src = img.data();
    let mut values = Vec::with_capacity(k * k);
    let mut window = Vec::with_capacity(k * k);
    let mut out = Vec::with_capacity(h * w);
    let mut routes = Vec::with_capacity(h * w);
    for row in 0..h as isize {
        for col in 0..w as isize {
            window.clear();
            for dr in -r..=r {
                for dc in -r..=r {
                    window.push(img.clamped_index(row + dr, col + dc));
                }
            }
            values.clear();
            values.extend(window.iter().map(|&i| src[i]));
            let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
            let m = *m;
            let from = window
                .iter()
                .copied()
                .filter(|&i| src[i].to_bits() == m.to_bits())
                .min()
                .expect("median value comes from the window");
            out.push(m);
            routes.push(from);
        }
    }
    Ok((ImageGrid::new(h, w, out, img.range())?, routes))
}

/// `k × k` median filter with edge-replicated borders.
pub fn median_filter(img: &ImageGrid, k: usize) -> Result<ImageGrid> {
    Ok(median_filter_routed(img, k)?.0)
}

/// Pulls an output cotangent back through the routing of [`median_filter_routed`].
pub fn median_pullback(routes: &[usize], cotangent: &ImageGrid) -> Result<ImageGrid> {
    if routes.len() != cotangent.len() {
        return Err(Error::Shape {
            expected: cotangent.shape(),
            actual: (routes.len(), 1),
        });
    }
    let mut grad = ImageGrid::zeros_like(cotangent);
    let g = grad.data_mut();
    for (&from, &v) in routes.iter().zip(cotangent.data()) {
        g[from] += v;
    }
    Ok(grad)
}
