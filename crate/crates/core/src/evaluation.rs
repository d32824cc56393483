//! PSNR/bpp measurement, rate-distortion curves, BD-Rate and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec::bitstream::Bitstream;
use crate::codec::model::PcicModel;
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::training::LoadedFrame;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`; identical
/// images give `f64::INFINITY`.
pub fn psnr(x: &Image, x_hat: &Image) -> Result<f64> {
    if (x.width, x.height, x.data.len()) != (x_hat.width, x_hat.height, x_hat.data.len()) {
        return Err(Error::Shape(format!(
            "psnr of {}×{} against {}×{}",
            x.width, x.height, x_hat.width, x_hat.height
        )));
    }
    let sq: f64 = x
        .data
        .iter()
        .zip(&x_hat.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    if sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (x.data.len() as f64 / sq).log10())
}

/// Bits per pixel of a whole stream, header included.
pub fn bpp(stream: &Bitstream, height: usize, width: usize) -> f64 {
    8.0 * stream.len() as f64 / (height * width) as f64
}

/// Serialize non-finite PSNR (lossless) as `null`.
mod psnr_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    /// `null` in JSON for a lossless point.
    #[serde(with = "psnr_value")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sort by rate and reject empty curves, bad values or repeated rates.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        let label = label.into();
        let bad = |detail: String| Error::InvalidCurve {
            label: label.clone(),
            detail,
        };
        if points.is_empty() {
            return Err(bad("no points".into()));
        }
        if let Some(p) = points.iter().find(|p| !(p.bpp > 0.0 && p.bpp.is_finite()) || p.psnr.is_nan()) {
            return Err(bad(format!("invalid point {p:?}")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if let Some(w) = points.windows(2).find(|w| w[0].bpp >= w[1].bpp) {
            return Err(bad(format!("rate is not strictly increasing at {} bpp", w[1].bpp)));
        }
        Ok(Self { label, points })
    }

    /// Re-check the invariants of a curve read from disk.
    pub fn validated(self) -> Result<Self> {
        let sorted = Self::new(self.label.clone(), self.points.clone())?;
        if sorted.points != self.points {
            return Err(Error::InvalidCurve {
                label: self.label,
                detail: "points are not sorted by rate".into(),
            });
        }
        Ok(sorted)
    }

    fn psnr_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.psnr), hi.max(p.psnr)))
    }
}

/// `log10(bpp)` as a function of PSNR.
#[derive(Debug, Clone)]
pub enum RateFit {
    /// Interpolating polynomial in `psnr − center`, lowest order first.
    Polynomial { center: f64, coefficients: Vec<f64> },
    /// Shape-preserving piecewise-cubic Hermite interpolant.
    Hermite { x: Vec<f64>, y: Vec<f64>, slopes: Vec<f64> },
}

impl RateFit {
    /// Cubic through exactly four points (lower degree for fewer), the
    /// monotone Hermite spline for more.
    pub fn new(curve: &RdCurve) -> Result<Self> {
        let bad = |detail: &str| Error::InvalidCurve {
            label: curve.label.clone(),
            detail: detail.into(),
        };
        if curve.points.len() < 2 {
            return Err(bad("BD-Rate needs at least two points"));
        }
        if curve.points.iter().any(|p| !p.psnr.is_finite()) {
            return Err(bad("lossless point in BD-Rate input"));
        }
        let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.psnr, p.bpp.log10())).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(bad("repeated PSNR values"));
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if x.len() <= 4 {
            let n = x.len();
            let center = x.iter().sum::<f64>() / n as f64;
            let vander = DMatrix::from_fn(n, n, |i, j| (x[i] - center).powi(j as i32));
            let coefficients = vander
                .lu()
                .solve(&DVector::from_vec(y))
                .ok_or_else(|| bad("singular fit"))?;
            return Ok(RateFit::Polynomial {
                center,
                coefficients: coefficients.iter().copied().collect(),
            });
        }
        let slopes = hermite_slopes(&x, &y);
        Ok(RateFit::Hermite { x, y, slopes })
    }

    pub fn eval(&self, at: f64) -> f64 {
        match self {
            RateFit::Polynomial { center, coefficients } => {
                let t = at - center;
                coefficients.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            RateFit::Hermite { x, y, slopes } => {
                let k = segment(x, at);
                let h = x[k + 1] - x[k];
                let s = (at - x[k]) / h;
                let (h00, h10) = (2.0 * s.powi(3) - 3.0 * s * s + 1.0, s.powi(3) - 2.0 * s * s + s);
                let (h01, h11) = (-2.0 * s.powi(3) + 3.0 * s * s, s.powi(3) - s * s);
                h00 * y[k] + h10 * h * slopes[k] + h01 * y[k + 1] + h11 * h * slopes[k + 1]
            }
        }
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            RateFit::Polynomial { center, coefficients } => {
                let anti = |x: f64| {
                    let t = x - center;
                    coefficients
                        .iter()
                        .enumerate()
                        .rev()
                        .fold(0.0, |acc, (i, c)| acc * t + c / (i + 1) as f64)
                        * t
                };
                anti(b) - anti(a)
            }
            RateFit::Hermite { x, .. } => {
                // Simpson's rule is exact for cubics, so integrate piecewise
                // between the knots that fall inside [a, b].
                let mut cuts = vec![a];
                cuts.extend(x.iter().copied().filter(|&k| k > a && k < b));
                cuts.push(b);
                cuts.windows(2)
                    .map(|w| {
                        let (l, r) = (w[0], w[1]);
                        (r - l) / 6.0 * (self.eval(l) + 4.0 * self.eval(0.5 * (l + r)) + self.eval(r))
                    })
                    .sum()
            }
        }
    }
}

/// Knot interval holding `at`, clamped to the end segments.
fn segment(x: &[f64], at: f64) -> usize {
    x.partition_point(|&k| k <= at).clamp(1, x.len() - 1) - 1
}

/// Fritsch-Carlson slopes with the three-point end rule.
fn hermite_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let mut s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            s = 0.0;
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            s = 3.0 * d0;
        }
        s
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Bjøntegaard delta rate of `test` against `anchor`, in percent; negative
/// means `test` needs fewer bits for the same quality.
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    let (ft, fa) = (RateFit::new(test)?, RateFit::new(anchor)?);
    let (t_lo, t_hi) = test.psnr_range();
    let (a_lo, a_hi) = anchor.psnr_range();
    let (lo, hi) = (t_lo.max(a_lo), t_hi.min(a_hi));
    if !(hi > lo) {
        return Err(Error::NoOverlap);
    }
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Per-frame line of an evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: String,
    pub label: String,
    pub lambda_index: u8,
    pub bytes: usize,
    pub bpp: f64,
    #[serde(with = "psnr_value")]
    pub psnr: f64,
    pub zeros: bool,
    pub degrade_voxel: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOptions {
    /// Code with an all-zero depth map.
    pub zeros: bool,
    /// Voxel size the frames' scans were degraded with (recorded only).
    pub degrade_voxel: Option<f64>,
}

/// The decoded image as an 8-bit file would hold it.
fn to_8bit(image: &Image) -> Image {
    Image::new(
        image.width,
        image.height,
        image.data.iter().map(|&v| (v * 255.0).round() / 255.0).collect(),
    )
}

/// Code every frame through a serialized bitstream and average bpp and
/// PSNR. Lossless frames are left out of the PSNR mean.
pub fn evaluate_model(
    model: &PcicModel,
    label: &str,
    frames: &[LoadedFrame],
    opts: EvalOptions,
) -> Result<(RdPoint, Vec<FrameResult>)> {
    if frames.is_empty() {
        return Err(Error::Shape("no frames to evaluate".into()));
    }
    let mut results = Vec::with_capacity(frames.len());
    for f in frames {
        let depth = (!opts.zeros).then_some(&f.depth);
        let coded = model.compress(&f.image, depth)?;
        let bytes = coded.stream.to_bytes();
        let decoded = model.decompress(&Bitstream::from_bytes(&bytes)?, depth)?;
        if decoded != coded.x_hat {
            return Err(Error::MalformedBitstream(format!(
                "{}: decoder output differs from the encoder's reconstruction",
                f.frame_id
            )));
        }
        let stream = &coded.stream;
        results.push(FrameResult {
            frame_id: f.frame_id.clone(),
            label: label.to_string(),
            lambda_index: model.config.codec.lambda_index,
            bytes: bytes.len(),
            bpp: bpp(stream, f.image.height, f.image.width),
            psnr: psnr(&f.image, &to_8bit(&decoded))?,
            zeros: opts.zeros,
            degrade_voxel: opts.degrade_voxel,
        });
    }
    let mean_bpp = results.iter().map(|r| r.bpp).sum::<f64>() / results.len() as f64;
    let finite: Vec<f64> = results.iter().map(|r| r.psnr).filter(|v| v.is_finite()).collect();
    if finite.len() < results.len() {
        log::warn!(
            "{label}: {} lossless frame(s) left out of the PSNR mean",
            results.len() - finite.len()
        );
    }
    let mean_psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok((
        RdPoint {
            bpp: mean_bpp,
            psnr: mean_psnr,
        },
        results,
    ))
}

/// One point per model (typically one per λ), sorted by rate.
pub fn evaluate_sweep(
    label: &str,
    models: &[PcicModel],
    frames: &[LoadedFrame],
    opts: EvalOptions,
) -> Result<(RdCurve, Vec<FrameResult>)> {
    let mut points = vec![];
    let mut records = vec![];
    for m in models {
        let (point, mut rs) = evaluate_model(m, label, frames, opts)?;
        points.push(point);
        records.append(&mut rs);
    }
    Ok((RdCurve::new(label, points)?, records))
}

/// Which curve the BD-Rates are measured against, and which rows get a Δ
/// column (improvement of `row` over `base`, both against the anchor).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSpec {
    pub anchor: String,
    pub deltas: Vec<(String, String)>,
}

fn signed(v: f64) -> String {
    if v == 0.0 {
        "0.00".into()
    } else {
        format!("{v:+.2}")
    }
}

/// CSV of BD-Rates against the anchor, one row per curve.
pub fn bd_table(curves: &[RdCurve], spec: &ReportSpec) -> Result<String> {
    let anchor = curves
        .iter()
        .find(|c| c.label == spec.anchor)
        .ok_or_else(|| Error::InvalidConfig {
            field: "anchor".into(),
            message: format!("no curve labelled `{}`", spec.anchor),
        })?;
    let bd = |c: &RdCurve| {
        if c.label == anchor.label {
            Some(0.0)
        } else {
            bd_rate(c, anchor).ok()
        }
    };
    let mut out = String::from("model,points,bd_rate_pct,delta_pct\n");
    for c in curves {
        let own = bd(c);
        let delta = spec
            .deltas
            .iter()
            .find(|(row, _)| *row == c.label)
            .and_then(|(_, base)| curves.iter().find(|b| &b.label == base))
            .and_then(|b| Some(own? - bd(b)?));
        let _ = writeln!(
            out,
            "{},{},{},{}",
            c.label,
            c.points.len(),
            own.map_or("n/a".into(), signed),
            delta.map_or("-".into(), signed)
        );
    }
    Ok(out)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Rate-distortion plot (bpp vs PSNR) as SVG.
pub fn rd_plot_svg(curves: &[RdCurve]) -> String {
    let (w, h, margin) = (640.0, 440.0, 60.0);
    let pts = curves.iter().flat_map(|c| &c.points).filter(|p| p.psnr.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        (x0, x1, y0, y1) = (x0.min(p.bpp), x1.max(p.bpp), y0.min(p.psnr), y1.max(p.psnr));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).max(1e-6);
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
    let sx = |v: f64| margin + (v - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |v: f64| h - margin - (v - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = margin,
        b = h - margin,
        r = w - margin
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#,
            sx(xv),
            h - margin + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
            margin - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Bpp</text>"#,
        w / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">PSNR (dB)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = c
            .points
            .iter()
            .filter(|p| p.psnr.is_finite())
            .map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for xy in &path {
            let (x, y) = xy.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = margin + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - margin - 150.0,
            w - margin - 130.0,
            w - margin - 124.0,
            ly + 4.0,
            xml_escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub plot: PathBuf,
    pub table: PathBuf,
}

/// Write `rd.svg` and `bd_rate.csv` into `out_dir`.
pub fn emit_report(curves: &[RdCurve], spec: &ReportSpec, out_dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let files = ReportFiles {
        plot: out_dir.join("rd.svg"),
        table: out_dir.join("bd_rate.csv"),
    };
    let table = bd_table(curves, spec)?;
    fs::write(&files.plot, rd_plot_svg(curves)).map_err(Error::io(&files.plot))?;
    fs::write(&files.table, table).map_err(Error::io(&files.table))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(label: &str, pts: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(label, pts.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect()).unwrap()
    }

    fn anchor() -> RdCurve {
        curve("a", &[(0.1, 30.0), (0.2, 32.5), (0.4, 35.0), (0.8, 37.2)])
    }

    #[test]
    fn psnr_cases() {
        let x = Image::new(2, 1, vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let off = Image::new(2, 1, x.data.iter().map(|v| v + 0.1).collect());
        assert!((psnr(&x, &off).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&x, &Image::new(1, 1, vec![0.0; 3])).is_err());
    }

    #[test]
    fn curve_is_sorted_and_strict() {
        let c = curve("c", &[(0.4, 35.0), (0.1, 30.0)]);
        assert_eq!(c.points[0].bpp, 0.1);
        let dup = vec![RdPoint { bpp: 0.1, psnr: 30.0 }, RdPoint { bpp: 0.1, psnr: 31.0 }];
        assert!(RdCurve::new("d", dup).is_err());
        assert!(RdCurve::new("e", vec![]).is_err());
        let unsorted = RdCurve {
            label: "f".into(),
            points: vec![RdPoint { bpp: 0.4, psnr: 35.0 }, RdPoint { bpp: 0.1, psnr: 30.0 }],
        };
        assert!(unsorted.validated().is_err());
    }

    #[test]
    fn lossless_point_serializes_as_null() {
        let p = RdPoint {
            bpp: 1.0,
            psnr: f64::INFINITY,
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"bpp":1.0,"psnr":null}"#);
        assert_eq!(serde_json::from_str::<RdPoint>(&s).unwrap(), p);
    }

    #[test]
    fn bd_self_and_scaled() {
        let a = anchor();
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
        let scaled = curve(
            "s",
            &a.points.iter().map(|p| (p.bpp * 1.1, p.psnr)).collect::<Vec<_>>(),
        );
        assert!((bd_rate(&scaled, &a).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn bd_no_overlap() {
        let b = curve("b", &[(0.1, 40.0), (0.2, 41.0)]);
        assert!(matches!(bd_rate(&b, &anchor()), Err(Error::NoOverlap)));
    }

    #[test]
    fn hermite_interpolates_and_integrates() {
        let c = curve(
            "h",
            &[(0.1, 30.0), (0.15, 31.0), (0.2, 32.5), (0.3, 33.4), (0.4, 35.0), (0.8, 37.2)],
        );
        let fit = RateFit::new(&c).unwrap();
        for p in &c.points {
            assert!((fit.eval(p.psnr) - p.bpp.log10()).abs() < 1e-12);
        }
        let n = 20_000;
        let (a, b) = (30.5, 36.9);
        let dx = (b - a) / n as f64;
        let trap: f64 = (0..n)
            .map(|i| 0.5 * dx * (fit.eval(a + i as f64 * dx) + fit.eval(a + (i + 1) as f64 * dx)))
            .sum();
        assert!((fit.integral(a, b) - trap).abs() < 1e-7);
        // monotone data stays monotone between knots
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=700 {
            let v = fit.eval(30.0 + i as f64 * 0.01);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn table_and_plot() {
        let a = anchor();
        let b = curve("b", &a.points.iter().map(|p| (p.bpp * 0.9, p.psnr)).collect::<Vec<_>>());
        let spec = ReportSpec {
            anchor: "a".into(),
            deltas: vec![("b".into(), "a".into())],
        };
        let t = bd_table(&[a.clone(), b.clone()], &spec).unwrap();
        assert_eq!(t, "model,points,bd_rate_pct,delta_pct\na,4,0.00,-\nb,4,-10.00,-10.00\n");
        let single = bd_table(std::slice::from_ref(&a), &spec).unwrap();
        assert_eq!(single.lines().count(), 2);
        let svg = rd_plot_svg(&[a, b]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(bd_table(&[], &spec).is_err());
    }
}
