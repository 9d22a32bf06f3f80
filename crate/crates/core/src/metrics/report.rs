use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cnr, compare_groups, fid, mutual_information, psnr, summarize, FeatureExtractor, HistogramSpec, RoiSpec};
use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Serializes non-finite values as the strings `"inf"`, `"-inf"`, `"nan"`.
mod metric_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_some(x),
            Some(x) if x.is_nan() => s.serialize_some("nan"),
            Some(x) if *x > 0.0 => s.serialize_some("inf"),
            Some(_) => s.serialize_some("-inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            None => None,
            Some(Repr::Num(x)) => Some(x),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Some(f64::INFINITY),
                "-inf" => Some(f64::NEG_INFINITY),
                "nan" => Some(f64::NAN),
                "" => None,
                other => return Err(serde::de::Error::custom(format!("bad metric value {other:?}"))),
            },
        })
    }
}

/// One image under one method. `psnr` is infinite when the 8-bit images coincide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub name: String,
    pub method: String,
    #[serde(with = "metric_value")]
    pub mi: Option<f64>,
    #[serde(with = "metric_value")]
    pub psnr: Option<f64>,
    #[serde(with = "metric_value")]
    pub cnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub n: usize,
    /// Values left out of mean/std because they were missing or non-finite.
    pub excluded: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub fid: Option<f64>,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub metric: String,
    pub method_a: String,
    pub method_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p: Option<f64>,
    /// Why the test could not be run, when it could not.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub histogram: HistogramSpec,
    pub feature_extractor: String,
    pub rows: Vec<ImageRow>,
    pub summaries: Vec<MethodSummary>,
    pub comparisons: Vec<GroupComparison>,
}

/// Everything the report is computed from. `methods[i].1[j]` is the output of
/// method `i` for `sources[j]`.
pub struct ReportInput<'a> {
    pub names: &'a [String],
    pub sources: &'a [ImageGrid],
    pub methods: &'a [(String, Vec<ImageGrid>)],
    /// Per-image CNR regions; an image's CNR is the mean over its regions.
    /// When present the sources get a CNR row too.
    pub rois: Option<&'a [Vec<RoiSpec>]>,
    pub histogram: HistogramSpec,
    pub extractor: &'a dyn FeatureExtractor,
    pub extractor_name: String,
    pub fid_regularization: Option<f64>,
}

pub const SOURCE_METHOD: &str = "source";
const METRICS: [&str; 3] = ["mi", "psnr", "cnr"];

fn metric_of(row: &ImageRow, metric: &str) -> Option<f64> {
    match metric {
        "mi" => row.mi,
        "psnr" => row.psnr,
        _ => row.cnr,
    }
}

impl MetricsReport {
    pub fn compute(input: &ReportInput<'_>) -> Result<MetricsReport> {
        let n = input.sources.len();
        if input.names.len() != n {
            return Err(Error::Data(format!(
                "{} names for {n} source images",
                input.names.len()
            )));
        }
        if let Some(rois) = input.rois {
            if rois.len() != n {
                return Err(Error::Data(format!("{} roi specs for {n} source images", rois.len())));
            }
        }
        for (method, outs) in input.methods {
            if outs.len() != n {
                return Err(Error::Data(format!(
                    "method {method} has {} images, expected {n}",
                    outs.len()
                )));
            }
            if method == SOURCE_METHOD {
                return Err(Error::Config(format!("method name {SOURCE_METHOD:?} is reserved")));
            }
        }
        input.histogram.validate()?;

        let roi_cnr = |j: usize, img: &ImageGrid| -> Result<Option<f64>> {
            match input.rois {
                None => Ok(None),
                Some(rois) => {
                    if rois[j].is_empty() {
                        return Ok(None);
                    }
                    let mut total = 0.0;
                    for spec in &rois[j] {
                        total += match cnr(img, spec) {
                            Ok(v) => v,
                            Err(Error::ZeroDenominator(_)) => f64::NAN,
                            Err(e) => return Err(e),
                        };
                    }
                    Ok(Some(total / rois[j].len() as f64))
                }
            }
        };

        let mut rows = Vec::new();
        if input.rois.is_some() {
            let src_rows: Vec<ImageRow> = (0..n)
                .into_par_iter()
                .map(|j| {
                    Ok(ImageRow {
                        name: input.names[j].clone(),
                        method: SOURCE_METHOD.into(),
                        mi: None,
                        psnr: None,
                        cnr: roi_cnr(j, &input.sources[j])?,
                    })
                })
                .collect::<Result<_>>()?;
            rows.extend(src_rows);
        }
        for (method, outs) in input.methods {
            let method_rows: Vec<ImageRow> = (0..n)
                .into_par_iter()
                .map(|j| {
                    let (src, out) = (&input.sources[j], &outs[j]);
                    let mi = match mutual_information(src, out, &input.histogram) {
                        Ok(v) => Some(v),
                        Err(Error::Histogram(_)) => Some(f64::NAN),
                        Err(e) => return Err(e),
                    };
                    Ok(ImageRow {
                        name: input.names[j].clone(),
                        method: method.clone(),
                        mi,
                        psnr: Some(psnr(src, out)?),
                        cnr: roi_cnr(j, out)?,
                    })
                })
                .collect::<Result<_>>()?;
            rows.extend(method_rows);
        }

        let mut groups: Vec<String> = Vec::new();
        if input.rois.is_some() {
            groups.push(SOURCE_METHOD.into());
        }
        groups.extend(input.methods.iter().map(|(m, _)| m.clone()));

        let values = |method: &str, metric: &str| -> (Vec<f64>, usize) {
            let mut kept = Vec::new();
            let mut excluded = 0;
            for row in rows.iter().filter(|r| r.method == method) {
                match metric_of(row, metric) {
                    Some(v) if v.is_finite() => kept.push(v),
                    _ => excluded += 1,
                }
            }
            (kept, excluded)
        };

        let mut summaries = Vec::new();
        for method in &groups {
            let fid_value = match input.methods.iter().find(|(m, _)| m == method) {
                Some((_, outs)) => match fid(input.sources, outs, input.extractor, input.fid_regularization) {
                    Ok(v) => Some(v),
                    Err(Error::Numeric(msg)) => {
                        log::warn!("fid for {method} unavailable: {msg}");
                        None
                    }
                    Err(e) => return Err(e),
                },
                None => None,
            };
            let metrics = METRICS
                .iter()
                .filter(|m| method != SOURCE_METHOD || **m == "cnr")
                .filter(|m| **m != "cnr" || input.rois.is_some())
                .map(|m| {
                    let (v, excluded) = values(method, m);
                    let s = (!v.is_empty()).then(|| summarize(&v));
                    MetricSummary {
                        metric: m.to_string(),
                        n: v.len(),
                        excluded,
                        mean: s.map(|s| s.mean),
                        std: s.and_then(|s| s.std.is_finite().then_some(s.std)),
                    }
                })
                .collect();
            summaries.push(MethodSummary {
                method: method.clone(),
                fid: fid_value,
                metrics,
            });
        }

        let mut comparisons = Vec::new();
        for metric in METRICS {
            let present: Vec<&String> = groups
                .iter()
                .filter(|g| (metric == "cnr" && input.rois.is_some()) || (metric != "cnr" && *g != SOURCE_METHOD))
                .collect();
            for (i, a) in present.iter().enumerate() {
                for b in &present[i + 1..] {
                    let (va, _) = values(a, metric);
                    let (vb, _) = values(b, metric);
                    let (t, df, p, note) = match compare_groups(&va, &vb) {
                        Ok(w) => (Some(w.t), Some(w.df), Some(w.p), None),
                        Err(Error::Statistics(msg)) => (None, None, None, Some(msg)),
                        Err(e) => return Err(e),
                    };
                    comparisons.push(GroupComparison {
                        metric: metric.into(),
                        method_a: (*a).clone(),
                        method_b: (*b).clone(),
                        n_a: va.len(),
                        n_b: vb.len(),
                        t,
                        df,
                        p,
                        note,
                    });
                }
            }
        }

        Ok(MetricsReport {
            version: env!("CARGO_PKG_VERSION").into(),
            histogram: input.histogram,
            feature_extractor: input.extractor_name.clone(),
            rows,
            summaries,
            comparisons,
        })
    }

    pub fn method_values(&self, method: &str, metric: &str) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| metric_of(r, metric))
            .collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<MetricsReport> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    /// Per-image table, one row per (image, method).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Strip plot of one metric's per-image distribution for every method,
    /// with the group mean marked.
    pub fn render_svg(&self, metric: &str) -> String {
        let mut groups: Vec<(&str, Vec<f64>)> = Vec::new();
        for s in &self.summaries {
            let v: Vec<f64> = self
                .method_values(&s.method, metric)
                .into_iter()
                .flatten()
                .filter(|v| v.is_finite())
                .collect();
            if !v.is_empty() {
                groups.push((&s.method, v));
            }
        }
        let (w, h, left, right, top, bottom) =
            (120.0 * groups.len().max(1) as f64 + 80.0, 320.0, 60.0, 20.0, 30.0, 40.0);
        let all = groups.iter().flat_map(|(_, v)| v.iter().copied());
        let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let y = |v: f64| top + (hi - v) / (hi - lo) * (h - top - bottom);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="18" text-anchor="middle">{metric}</text>"#,
            w / 2.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
            h - bottom
        );
        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 4.0,
                y(v) + 4.0,
                format_tick(v)
            );
        }
        let slot = (w - left - right) / groups.len().max(1) as f64;
        for (i, (name, vals)) in groups.iter().enumerate() {
            let cx = left + slot * (i as f64 + 0.5);
            for (j, v) in vals.iter().enumerate() {
                // deterministic horizontal jitter
                let dx = ((j * 37) % 41) as f64 / 40.0 * slot * 0.4 - slot * 0.2;
                let _ = writeln!(
                    svg,
                    r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#3b6ea8" fill-opacity="0.6"/>"##,
                    cx + dx,
                    y(*v)
                );
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let _ = writeln!(
                svg,
                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#c0392b" stroke-width="2"/>"##,
                cx - slot * 0.3,
                y(m),
                cx + slot * 0.3,
                y(m)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{name} (n={})</text>"#,
                h - bottom + 20.0,
                vals.len()
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// `report.json`, `per_image.csv` and one `<metric>.svg` per metric.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        let mut written = vec![dir.join("report.json"), dir.join("per_image.csv")];
        self.write_json(&written[0])?;
        self.write_csv(&written[1])?;
        for metric in METRICS {
            if self.rows.iter().any(|r| metric_of(r, metric).is_some()) {
                let path = dir.join(format!("{metric}.svg"));
                std::fs::write(&path, self.render_svg(metric)).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::IntensityRange;
    use crate::metrics::{DownsampleFlatten, Rect};

    fn images(n: usize, shift: f64) -> Vec<ImageGrid> {
        (0..n)
            .map(|k| {
                ImageGrid::from_fn(8, 8, IntensityRange::UNIT, |r, c| {
                    (((r * 3 + c * 5 + k * 7) % 11) as f64 / 10.0 + shift).min(1.0)
                })
            })
            .collect()
    }

    #[test]
    fn self_comparison_report() {
        let src = images(6, 0.0);
        let names: Vec<String> = (0..6).map(|i| format!("img{i}")).collect();
        let methods = vec![("a".to_string(), src.clone()), ("b".to_string(), src.clone())];
        let rois = vec![
            vec![RoiSpec {
                roi: Rect::new(0, 0, 3, 3),
                background: Rect::new(4, 4, 3, 3),
            }];
            6
        ];
        let fx = DownsampleFlatten { size: 2 };
        let report = MetricsReport::compute(&ReportInput {
            names: &names,
            sources: &src,
            methods: &methods,
            rois: Some(&rois),
            histogram: HistogramSpec::default(),
            extractor: &fx,
            extractor_name: "downsample-2".into(),
            fid_regularization: None,
        })
        .unwrap();
        assert_eq!(report.rows.len(), 18);
        for row in report.rows.iter().filter(|r| r.method != SOURCE_METHOD) {
            assert_eq!(row.psnr, Some(f64::INFINITY));
        }
        for s in report.summaries.iter().filter(|s| s.method != SOURCE_METHOD) {
            assert!(s.fid.unwrap() < 1e-6);
        }
        let ab: Vec<_> = report
            .comparisons
            .iter()
            .filter(|c| c.method_a == "a" && c.method_b == "b")
            .collect();
        assert_eq!(ab.len(), 3);
        for c in ab {
            if c.metric == "psnr" {
                assert!(c.p.is_none());
            } else {
                assert_eq!(c.p, Some(1.0), "{}", c.metric);
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let files = report.write_all(dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        let back = MetricsReport::read_json(dir.path().join("report.json")).unwrap();
        assert_eq!(back.rows[6].psnr, Some(f64::INFINITY));
        let csv = std::fs::read_to_string(dir.path().join("per_image.csv")).unwrap();
        assert!(csv.starts_with("name,method,mi,psnr,cnr\n"));
        assert!(csv.contains(",inf,"));
    }

    #[test]
    fn mismatched_inputs_are_data_errors() {
        let src = images(3, 0.0);
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let methods = vec![("a".to_string(), images(2, 0.1))];
        let fx = DownsampleFlatten { size: 2 };
        let r = MetricsReport::compute(&ReportInput {
            names: &names,
            sources: &src,
            methods: &methods,
            rois: None,
            histogram: HistogramSpec::default(),
            extractor: &fx,
            extractor_name: String::new(),
            fid_regularization: None,
        });
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
