//! Text and image outputs of the equivariance analysis.

use std::fmt::Write as _;
use std::thread;

use arcaps_core::align::{BaselineStats, Histogram};
use arcaps_core::data::Dataset;
use arcaps_core::lab::{self, AlignmentReport, CosineReport, Family};
use arcaps_core::model::ArCapsNet;
use arcaps_core::params::ParameterStore;
use arcaps_core::transform::ImageDims;

use crate::error::{Error, Result};

/// [`lab::equivariance_analysis`] over `indices` split into `workers`
/// contiguous shards, merged in shard order.
pub fn equivariance(
    model: &ArCapsNet,
    params: &ParameterStore<f32>,
    test: &Dataset,
    indices: &[usize],
    families: &[Family],
    workers: usize,
) -> Result<(AlignmentReport, CosineReport)> {
    let workers = workers.clamp(1, indices.len().max(1));
    let chunk = indices.len().div_ceil(workers).max(1);
    let parts: Vec<Result<(AlignmentReport, CosineReport)>> = thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| s.spawn(move || Ok(lab::equivariance_analysis(model, params, test, part, families)?)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("analysis worker panicked".into()))))
            .collect()
    });
    let mut merged: Option<(AlignmentReport, CosineReport)> = None;
    for p in parts {
        let (a, c) = p?;
        match merged.as_mut() {
            None => merged = Some((a, c)),
            Some((ma, mc)) => {
                ma.merge(&a)?;
                mc.merge(&c)?;
            }
        }
    }
    match merged {
        Some(m) => Ok(m),
        None => Ok(lab::equivariance_analysis(model, params, test, &[], families)?),
    }
}

/// Mean ratio per digit and family with a final `avg` row.
pub fn alignment_table(report: &AlignmentReport) -> String {
    let mut out = String::from("digit");
    for f in &report.families {
        let _ = write!(out, ",{}", f.label());
    }
    out.push('\n');
    for class in 0..report.classes {
        let _ = write!(out, "{class}");
        for k in 0..report.families.len() {
            let _ = write!(out, ",{}", cell(report.mean(class, k)));
        }
        out.push('\n');
    }
    out.push_str("avg");
    for k in 0..report.families.len() {
        let _ = write!(out, ",{}", cell(report.family_mean(k)));
    }
    out.push('\n');
    out
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        String::new()
    }
}

/// Overall ratio statistics against the random baseline, as `metric,value`
/// rows.
pub fn alignment_summary(report: &AlignmentReport, baseline: &BaselineStats) -> String {
    let (mean, std) = report.overall();
    let rows: [(&str, String); 9] = [
        ("samples", report.samples.to_string()),
        ("degenerate_images", report.degenerate.to_string()),
        ("excluded_rows", report.excluded_rows.to_string()),
        ("ratio_count", report.ratios.len().to_string()),
        ("mean_ratio", mean.to_string()),
        ("std_ratio", std.to_string()),
        ("baseline_mean", baseline.mean.to_string()),
        ("baseline_std", baseline.std.to_string()),
        ("gap", (mean - baseline.mean).to_string()),
    ];
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

/// Two columns: bin centre and count.
pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_center,count\n");
    for (c, n) in h.centers().iter().zip(&h.counts) {
        let _ = writeln!(out, "{c:.3},{n}");
    }
    out
}

/// File stem for a positive family's cosine histogram: `rot`, `x` or `y`.
pub fn family_stem(f: Family) -> &'static str {
    let p = if f.is_positive() { f } else { f.opposite() };
    match p {
        Family::RotPos => "rot",
        Family::XPos => "x",
        _ => "y",
    }
}

/// Cosine histograms for every positive family, keyed by [`family_stem`].
pub fn cosine_histograms(report: &CosineReport) -> Vec<(&'static str, String)> {
    report
        .histograms()
        .iter()
        .map(|(f, h)| (family_stem(*f), histogram_csv(h)))
        .collect()
}

/// Pixel value in `[0, 1]` to a byte.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles laid side by side as a binary PGM (one channel) or PPM (three
/// channels) image.
pub fn image_strip(tiles: &[Vec<f32>], dims: ImageDims) -> Result<Vec<u8>> {
    let magic = match dims.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Usage(format!("cannot write {c}-channel images"))),
    };
    if tiles.iter().any(|t| t.len() != dims.len()) {
        return Err(Error::Usage("tile size does not match the image shape".into()));
    }
    let width = dims.cols * tiles.len();
    let mut out = format!("{magic}\n{width} {}\n255\n", dims.rows).into_bytes();
    for r in 0..dims.rows {
        for t in tiles {
            let row = &t[r * dims.cols * dims.channels..(r + 1) * dims.cols * dims.channels];
            out.extend(row.iter().map(|&v| quantize(v)));
        }
    }
    Ok(out)
}

/// Offsets of a perturbation sweep, one per tile.
pub fn offsets_csv(offsets: &[f64]) -> String {
    let mut out = String::from("tile,offset\n");
    for (i, o) in offsets.iter().enumerate() {
        let _ = writeln!(out, "{i},{o}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_header_and_layout() {
        let dims = ImageDims::new(2, 1, 1);
        let bytes = image_strip(&[vec![0.0, 1.0], vec![0.5, 0.2]], dims).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], [0, 128, 255, 51]);
    }
}
