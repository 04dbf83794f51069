//! Artifact persistence: the array container, stage manifests, CSV tables and
//! SVG plots.
//!
//! # Container grammar
//!
//! ```text
//! PLUMEARRAY 1
//! name: <utf-8 text without newlines>
//! dtype: f64-le
//! shape: <comma separated extents, empty for a scalar>
//! order: row-major
//! creator: plume-core <version>
//! sha256: <64 lowercase hex digits of the payload>
//! END
//! <payload: 8·∏shape bytes>
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never observes a partial artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "PLUMEARRAY 1";
pub const CREATOR: &str = concat!("plume-core ", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Io(e)
    })
}

/// A named, shaped block of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch {
                context: "array shape",
                expected,
                actual: data.len(),
            });
        }
        let name = name.into();
        if name.contains('\n') {
            return Err(Error::Header("array name contains a newline".into()));
        }
        Ok(Self { name, shape, data })
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, vec![], vec![value]).expect("scalar shape")
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(name, vec![n], data).expect("vector shape")
    }

    /// Row-major copy of a column-major nalgebra matrix.
    pub fn from_matrix(name: impl Into<String>, m: &nalgebra::DMatrix<f64>) -> Self {
        let data = m.transpose().as_slice().to_vec();
        Self::new(name, vec![m.nrows(), m.ncols()], data).expect("matrix shape")
    }

    pub fn to_matrix(&self) -> Result<nalgebra::DMatrix<f64>> {
        match self.shape[..] {
            [r, c] => Ok(nalgebra::DMatrix::from_row_slice(r, c, &self.data)),
            _ => Err(Error::Header(format!(
                "{} has shape {:?}, expected a matrix",
                self.name, self.shape
            ))),
        }
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<&Self> {
        if self.shape != shape {
            return Err(Error::Header(format!(
                "{} has shape {:?}, expected {:?}",
                self.name, self.shape, shape
            )));
        }
        Ok(self)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(8 * self.data.len());
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let shape: Vec<String> = self.shape.iter().map(|s| s.to_string()).collect();
        let header = format!(
            "{MAGIC}\nname: {}\ndtype: f64-le\nshape: {}\norder: row-major\ncreator: {CREATOR}\nsha256: {}\nEND\n",
            self.name,
            shape.join(","),
            sha256_hex(&payload)
        );
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a container; `label` names the source in error messages.
    pub fn decode(bytes: &[u8], label: &str) -> Result<Self> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut pos = 0;
        let mut first = true;
        loop {
            let rest = &bytes[pos..];
            let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
                return Err(Error::Truncated(label.to_string()));
            };
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::Header(format!("{label}: header is not utf-8")))?;
            pos += nl + 1;
            if first {
                if line != MAGIC {
                    return Err(Error::Header(format!("{label}: bad magic line")));
                }
                first = false;
                continue;
            }
            if line == "END" {
                break;
            }
            let (k, v) = line
                .split_once(": ")
                .or_else(|| line.strip_suffix(':').map(|k| (k, "")))
                .ok_or_else(|| Error::Header(format!("{label}: malformed line {line:?}")))?;
            if fields.insert(k, v).is_some() {
                return Err(Error::Header(format!("{label}: duplicate key {k}")));
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Header(format!("{label}: missing {k}")))
        };
        if get("dtype")? != "f64-le" {
            return Err(Error::Header(format!("{label}: unsupported dtype")));
        }
        if get("order")? != "row-major" {
            return Err(Error::Header(format!("{label}: unsupported order")));
        }
        let shape_text = get("shape")?;
        let shape = if shape_text.is_empty() {
            vec![]
        } else {
            shape_text
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Header(format!("{label}: bad shape {shape_text:?}")))?
        };
        let count: usize = shape.iter().product();
        let payload = &bytes[pos..];
        if payload.len() < 8 * count {
            return Err(Error::Truncated(label.to_string()));
        }
        if payload.len() > 8 * count {
            return Err(Error::Header(format!("{label}: trailing bytes after payload")));
        }
        if sha256_hex(payload) != get("sha256")? {
            return Err(Error::HashMismatch(label.to_string()));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            name: get("name")?.to_string(),
            shape,
            data,
        })
    }
}

pub fn save_array(path: &Path, array: &Array) -> Result<()> {
    write_atomic(path, &array.encode())
}

pub fn load_array(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path)?;
    Array::decode(&bytes, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

/// Provenance record written by every pipeline stage.
///
/// Holding the full configuration text and the seed is enough to rerun the
/// stage; `inputs` are the only files the stage read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub creator: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: String,
    #[serde(default)]
    pub inputs: Vec<FileRecord>,
    #[serde(default)]
    pub outputs: Vec<FileRecord>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, config_text: String, config_hash: String) -> Self {
        Self {
            stage: stage.to_string(),
            creator: CREATOR.to_string(),
            seed,
            config_hash,
            config: config_text,
            inputs: vec![],
            outputs: vec![],
            metrics: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn file_name(stage: &str) -> String {
        format!("{stage}.manifest.toml")
    }

    /// Records a file under `root`, hashing its current content.
    pub fn record(list: &mut Vec<FileRecord>, root: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        list.push(FileRecord {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Rehashes every declared input under `root`.
    pub fn verify_inputs(&self, root: &Path) -> Result<()> {
        for rec in &self.inputs {
            if file_sha256(&root.join(&rec.path))? != rec.sha256 {
                return Err(Error::HashMismatch(rec.path.clone()));
            }
        }
        Ok(())
    }

    pub fn output_paths(&self, root: &Path) -> Vec<PathBuf> {
        self.outputs.iter().map(|r| root.join(&r.path)).collect()
    }
}

/// Fixed-precision rendering used in every text artifact.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.is_finite() {
        format!("{v:.10e}")
    } else {
        format!("{v}")
    }
}

/// Writes a CSV table, preceded by a comment carrying the config hash.
pub fn write_csv(
    path: &Path,
    config_hash: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut out = format!("# config_hash: {config_hash}\n{}\n", header.join(","));
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Whitespace-separated `(epoch, loss)` history table.
pub fn write_history(path: &Path, history: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("# epoch loss\n");
    for (e, l) in history {
        writeln!(out, "{e} {}", fmt_num(*l)).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesStyle {
    Line,
    /// Thin translucent curve; drawn before everything else.
    Sample,
    /// Heavy dark curve; drawn after everything else.
    Truth,
    /// Markers with vertical error bars.
    ErrorBars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub style: SeriesStyle,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Lower and upper bars, used by [`SeriesStyle::ErrorBars`].
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Series {
    pub fn line(label: impl Into<String>, style: SeriesStyle, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            style,
            x,
            y,
            bounds: None,
        }
    }

    pub fn error_bars(
        label: impl Into<String>,
        x: Vec<f64>,
        y: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Self {
        Self {
            label: label.into(),
            style: SeriesStyle::ErrorBars,
            x,
            y,
            bounds: Some((lower, upper)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub config_hash: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn style_rank(s: SeriesStyle) -> u8 {
    match s {
        SeriesStyle::Sample => 0,
        SeriesStyle::Line | SeriesStyle::ErrorBars => 1,
        SeriesStyle::Truth => 2,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl Plot {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &x in &s.x {
                b.0 = b.0.min(x);
                b.1 = b.1.max(x);
            }
            let extra = s.bounds.iter().flat_map(|(l, u)| l.iter().chain(u));
            for &y in s.y.iter().chain(extra) {
                b.2 = b.2.min(y);
                b.3 = b.3.max(y);
            }
        }
        // Degenerate ranges still need a finite scale.
        if b.1 <= b.0 {
            b.0 -= 0.5;
            b.1 += 0.5;
        }
        if b.3 <= b.2 {
            let pad = if b.2 == 0.0 { 1.0 } else { 0.1 * b.2.abs() };
            b.2 -= pad;
            b.3 += pad;
        }
        b
    }

    /// Deterministic SVG document. Samples are drawn first and truth last.
    pub fn to_svg(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let mut s = String::new();
        let w = |s: &mut String, t: String| {
            s.push_str(&t);
            s.push('\n');
        };
        w(&mut s, format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
        ));
        w(&mut s, format!("<!-- config_hash: {} -->", escape(&self.config_hash)));
        w(&mut s, format!(
            "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
        ));
        w(&mut s, format!(
            "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
            WIDTH / 2.0,
            escape(&self.title)
        ));
        w(&mut s, format!(
            "<line class=\"axis\" x1=\"{m:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>",
            m = MARGIN,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN
        ));
        w(&mut s, format!(
            "<line class=\"axis\" x1=\"{m:.2}\" y1=\"{m:.2}\" x2=\"{m:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>",
            m = MARGIN,
            b = HEIGHT - MARGIN
        ));
        for (v, anchor, x, y) in [
            (x0, "start", MARGIN, HEIGHT - MARGIN + 16.0),
            (x1, "end", WIDTH - MARGIN, HEIGHT - MARGIN + 16.0),
        ] {
            w(&mut s, format!(
                "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-size=\"11\">{}</text>",
                short(v)
            ));
        }
        for (v, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
            w(&mut s, format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>",
                MARGIN - 4.0,
                y + 4.0,
                short(v)
            ));
        }
        w(&mut s, format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            WIDTH / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        ));
        w(&mut s, format!(
            "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        ));

        let mut order: Vec<usize> = (0..self.series.len()).collect();
        order.sort_by_key(|&i| (style_rank(self.series[i].style), i));
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let mut legend = 0usize;
        for (k, &i) in order.iter().enumerate() {
            let se = &self.series[i];
            let color = palette[k % palette.len()];
            let pts: Vec<String> = se
                .x
                .iter()
                .zip(&se.y)
                .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let label = escape(&se.label);
            match se.style {
                SeriesStyle::Sample => w(&mut s, format!(
                    "<polyline class=\"sample\" points=\"{}\" fill=\"none\" stroke=\"#7f7f7f\" stroke-opacity=\"0.35\" stroke-width=\"1\"><title>{label}</title></polyline>",
                    pts.join(" ")
                )),
                SeriesStyle::Line => w(&mut s, format!(
                    "<polyline class=\"line\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"><title>{label}</title></polyline>",
                    pts.join(" ")
                )),
                SeriesStyle::Truth => w(&mut s, format!(
                    "<polyline class=\"truth\" points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"2.5\"><title>{label}</title></polyline>",
                    pts.join(" ")
                )),
                SeriesStyle::ErrorBars => {
                    w(&mut s, format!("<g class=\"errorbars\"><title>{label}</title>"));
                    if let Some((lo, hi)) = &se.bounds {
                        for ((&x, &l), &h) in se.x.iter().zip(lo).zip(hi) {
                            w(&mut s, format!(
                                "<line x1=\"{x:.2}\" y1=\"{l:.2}\" x2=\"{x:.2}\" y2=\"{h:.2}\" stroke=\"{color}\"/>",
                                x = px(x),
                                l = py(l),
                                h = py(h)
                            ));
                        }
                    }
                    for (&x, &y) in se.x.iter().zip(&se.y) {
                        w(&mut s, format!(
                            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                            px(x),
                            py(y)
                        ));
                    }
                    w(&mut s, "</g>".into());
                }
            }
            // One legend entry per distinct non-sample label keeps dense
            // posterior plots readable.
            if se.style != SeriesStyle::Sample {
                w(&mut s, format!(
                    "<text class=\"legend\" x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{}\">{label}</text>",
                    WIDTH - MARGIN - 120.0,
                    MARGIN + 14.0 * legend as f64,
                    if se.style == SeriesStyle::Truth { "black" } else { color }
                ));
                legend += 1;
            }
        }
        w(&mut s, "</svg>".into());
        s
    }

    /// Long-format table: one row per point.
    pub fn to_csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![];
        for se in &self.series {
            for (k, (&x, &y)) in se.x.iter().zip(&se.y).enumerate() {
                let (lo, hi) = match &se.bounds {
                    Some((l, u)) => (fmt_num(l[k]), fmt_num(u[k])),
                    None => (String::new(), String::new()),
                };
                rows.push(vec![
                    se.label.replace(',', ";"),
                    style_name(se.style).into(),
                    fmt_num(x),
                    fmt_num(y),
                    lo,
                    hi,
                ]);
            }
        }
        rows
    }
}

fn style_name(s: SeriesStyle) -> &'static str {
    match s {
        SeriesStyle::Line => "line",
        SeriesStyle::Sample => "sample",
        SeriesStyle::Truth => "truth",
        SeriesStyle::ErrorBars => "errorbars",
    }
}

fn short(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Writes `path` (SVG) and its CSV twin with the same stem.
pub fn emit_plot(plot: &Plot, path: &Path) -> Result<()> {
    if plot.series.is_empty() || plot.series.iter().all(|s| s.x.is_empty()) {
        return Err(Error::Config("plot has no data".into()));
    }
    for s in &plot.series {
        if s.x.len() != s.y.len() {
            return Err(Error::DimensionMismatch {
                context: "plot series",
                expected: s.x.len(),
                actual: s.y.len(),
            });
        }
    }
    write_atomic(path, plot.to_svg().as_bytes())?;
    write_csv(
        &path.with_extension("csv"),
        &plot.config_hash,
        &["series", "style", "x", "y", "lower", "upper"],
        &plot.to_csv_rows(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_and_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Array::scalar("answer", -0.0);
        save_array(&dir.path().join("s.arr"), &s).unwrap();
        let back = load_array(&dir.path().join("s.arr")).unwrap();
        assert!(back.shape.is_empty());
        assert_eq!(back.data[0].to_bits(), (-0.0f64).to_bits());

        let m = nalgebra::DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 + 0.1);
        let a = Array::from_matrix("m", &m);
        assert_eq!(a.data[1], 1.1);
        let p = dir.path().join("m.arr");
        save_array(&p, &a).unwrap();
        let back = load_array(&p).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_matrix().unwrap(), m);
    }

    #[test]
    fn corruption_is_detected() {
        let a = Array::vector("v", vec![1.0, 2.0, 3.0]);
        let mut bytes = a.encode();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Array::decode(&bytes, "v"), Err(Error::HashMismatch(_))));
        let good = a.encode();
        assert!(matches!(
            Array::decode(&good[..good.len() - 3], "v"),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(Array::decode(b"PLUMEARRAY 1\nname", "v"), Err(Error::Truncated(_))));
        assert!(matches!(Array::decode(b"NOPE\n", "v"), Err(Error::Header(_))));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Array::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.arr");
        save_array(&f, &Array::scalar("a", 1.0)).unwrap();
        let mut m = Manifest::new("reduce", 7, "seed = 7\n".into(), "abc".into());
        Manifest::record(&mut m.inputs, dir.path(), &f).unwrap();
        m.metrics.insert("err".into(), 0.25);
        let p = dir.path().join(Manifest::file_name("reduce"));
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.inputs[0].path, "a.arr");
        back.verify_inputs(dir.path()).unwrap();
        save_array(&f, &Array::scalar("a", 2.0)).unwrap();
        assert!(back.verify_inputs(dir.path()).is_err());
    }

    fn posterior_plot() -> Plot {
        let x: Vec<f64> = (0..5).map(f64::from).collect();
        Plot {
            title: "posterior".into(),
            x_label: "t".into(),
            y_label: "z".into(),
            config_hash: "h".into(),
            series: vec![
                Series::line("truth", SeriesStyle::Truth, x.clone(), vec![1.0, 2.0, 3.0, 2.0, 1.0]),
                Series::line("s0", SeriesStyle::Sample, x.clone(), vec![1.1, 2.1, 2.9, 2.0, 0.9]),
                Series::line("s1", SeriesStyle::Sample, x, vec![0.9, 1.9, 3.1, 2.2, 1.0]),
            ],
        }
    }

    #[test]
    fn constant_series_is_horizontal() {
        let plot = Plot {
            title: "c".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            config_hash: "h".into(),
            series: vec![Series::line("c", SeriesStyle::Line, vec![0.0, 1.0, 2.0], vec![4.0; 3])],
        };
        let svg = plot.to_svg();
        let line = svg.lines().find(|l| l.contains("class=\"line\"")).unwrap();
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        let ys: Vec<&str> = pts.split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert_eq!(ys.len(), 3);
        assert!(ys.iter().all(|y| *y == ys[0]));
    }

    #[test]
    fn posterior_plot_draws_truth_last_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("post.svg");
        emit_plot(&posterior_plot(), &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        emit_plot(&posterior_plot(), &p).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        let svg = String::from_utf8(first).unwrap();
        assert_eq!(svg.matches("class=\"sample\"").count(), 2);
        assert_eq!(svg.matches("class=\"truth\"").count(), 1);
        let truth_at = svg.find("class=\"truth\"").unwrap();
        assert!(svg.rfind("class=\"sample\"").unwrap() < truth_at);
        let csv = std::fs::read_to_string(p.with_extension("csv")).unwrap();
        assert!(csv.starts_with("# config_hash: h\n"));
        assert_eq!(csv.lines().count(), 2 + 15);
    }

    #[test]
    fn empty_plot_is_rejected() {
        let mut plot = posterior_plot();
        plot.series.clear();
        assert!(emit_plot(&plot, Path::new("/nonexistent/x.svg")).is_err());
    }
}
