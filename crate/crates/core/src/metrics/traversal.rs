use std::io::Write;

use crate::datasets::{write_csv_header, write_csv_rows, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::model::LadderModel;
use crate::tensor::Tensor;

/// Eight evenly spaced values in `[-3, 3]`.
pub fn default_traversal_values() -> Vec<f64> {
    (0..8).map(|i| -3.0 + 6.0 * i as f64 / 7.0).collect()
}

/// Index of the trajectory with the median total path length (lower median,
/// ties by index).
pub fn traversal_reference(dataset: &TrajectoryDataset) -> usize {
    let mut order: Vec<(f64, usize)> = dataset.trajectories.iter().map(|t| t.path_length()).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order[(order.len() - 1) / 2].1
}

/// Decodes the reference with latent `(ladder, dim)` replaced by each value and
/// all other latents held at their posterior means. Returns one `C × T` tensor
/// per value.
pub fn latent_traversal(
    model: &LadderModel,
    reference: &Tensor,
    ladder: usize,
    dim: usize,
    values: &[f64],
) -> Result<Vec<Tensor>> {
    let dims = &model.config().latent_dims;
    if ladder >= dims.len() || dim >= dims[ladder] {
        return Err(Error::InvalidArgument(format!(
            "no latent ({ladder}, {dim}) in a model with ladder sizes {dims:?}"
        )));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("traversal needs at least one value".into()));
    }
    let x = match reference.shape() {
        [c, t] => reference.clone().reshape(&[1, *c, *t])?,
        [1, _, _] => reference.clone(),
        s => return Err(Error::InvalidArgument(format!("reference must be C × T, got {s:?}"))),
    };
    let means = model.posterior_means(&x)?;
    let n = values.len();
    let z: Vec<Tensor> = means
        .iter()
        .enumerate()
        .map(|(l, mu)| {
            let d = mu.len();
            Tensor::from_fn(&[n, d], |i| if l == ladder && i % d == dim { values[i / d] } else { mu.data()[i % d] })
        })
        .collect();
    let out = model.decode_values(&z)?;
    (0..n).map(|i| out.slice_outer(i, 1)?.reshape(&out.shape()[1..])).collect()
}

fn to_points(traj: &Tensor) -> Result<Vec<[f64; 2]>> {
    match traj.shape() {
        [2, t] => Ok((0..*t).map(|i| [traj.data()[i], traj.data()[t + i]]).collect()),
        s => Err(Error::InvalidArgument(format!("expected a 2 × T trajectory, got {s:?}"))),
    }
}

/// Traversal CSV: the dataset trajectory columns plus the traversal value.
pub fn write_traversal_csv(w: &mut impl Write, trajectories: &[Tensor], values: &[f64]) -> Result<()> {
    write_csv_header(w, &["value"])?;
    for (i, (traj, v)) in trajectories.iter().zip(values).enumerate() {
        write_csv_rows(w, i, &to_points(traj)?, &[format!("{v}")])?;
    }
    Ok(())
}

fn ramp(frac: f64) -> String {
    let r = (40.0 + 200.0 * frac).round() as u8;
    let b = (240.0 - 200.0 * frac).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

/// Standalone SVG with one polyline per traversal value, blue (lowest) to red (highest).
pub fn write_traversal_svg(w: &mut impl Write, trajectories: &[Tensor], values: &[f64]) -> Result<()> {
    let paths = trajectories.iter().map(to_points).collect::<Result<Vec<_>>>()?;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in paths.iter().flatten() {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let size = 400.0;
    let margin = 20.0;
    let scale = (size - 2.0 * margin) / span;
    let (vmin, vmax) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#)?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    for (path, v) in paths.iter().zip(values) {
        let frac = if vmax > vmin { (v - vmin) / (vmax - vmin) } else { 0.5 };
        let pts: Vec<String> = path
            .iter()
            .map(|p| format!("{:.2},{:.2}", margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>z = {v}</title></polyline>"#,
            ramp(frac),
            pts.join(" ")
        )?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}
