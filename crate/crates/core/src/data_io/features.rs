use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

pub const FEATURE_FORMAT: &str = "gptree-features";
pub const FEATURE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// The dtype that stores `T` without loss.
    pub fn native<T: Real>() -> Self {
        if std::mem::size_of::<T>() == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

/// Sidecar header stored next to a raw feature payload as `<payload>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_version")]
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub dtype: Dtype,
    pub endianness: String,
    #[serde(rename = "C")]
    pub n_classes: usize,
}

fn default_format() -> String {
    FEATURE_FORMAT.to_string()
}

fn default_version() -> u32 {
    FEATURE_FORMAT_VERSION
}

pub fn header_path(features: &Path) -> PathBuf {
    let mut s = features.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Reads one non-negative integer label per non-empty line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("{}:{}: `{}` is not a class label", path.display(), i + 1, l.trim())))
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

/// Loads features from a `.csv` file or a raw binary payload with a JSON sidecar.
///
/// CSV: numeric rows, an optional non-numeric header line; without a labels
/// file the last column holds the labels. Binary: row-major little-endian
/// values described by `<features>.json`; a labels file is required.
pub fn load_dataset<T: Real>(features: &Path, labels: Option<&Path>) -> Result<Dataset<T>> {
    if is_csv(features) {
        return load_csv(features, labels);
    }
    let header: FeatureHeader = serde_json::from_slice(&read(&header_path(features))?)
        .map_err(|e| Error::Format(format!("{}: {e}", header_path(features).display())))?;
    if header.format != FEATURE_FORMAT {
        return Err(Error::Format(format!("unknown feature format `{}`", header.format)));
    }
    if header.version != FEATURE_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: header.version, expected: FEATURE_FORMAT_VERSION });
    }
    if header.endianness != "little" {
        return Err(Error::Format(format!("unsupported endianness `{}`", header.endianness)));
    }
    let bytes = read(features)?;
    let expected = header.n * header.d * header.dtype.width();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{} holds {} bytes but the header describes {}x{} {:?} values ({expected} bytes)",
            features.display(),
            bytes.len(),
            header.n,
            header.d,
            header.dtype
        )));
    }
    let values: Vec<T> = match header.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect(),
    };
    let x = Matrix::from_vec(header.n, header.d, values)?;
    let labels_path = labels.ok_or_else(|| Error::Format("binary features need a labels file".into()))?;
    let y = read_labels(labels_path)?;
    if y.len() != header.n {
        return Err(Error::Format(format!("{} labels for {} feature rows", y.len(), header.n)));
    }
    Dataset::new(x, y, header.n_classes)
}

fn load_csv<T: Real>(path: &Path, labels: Option<&Path>) -> Result<Dataset<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path).map_err(|e| {
        Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{}: {e}", path.display())))
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::Format(format!("{}:{}: non-numeric field", path.display(), i + 1))),
        }
    }
    let (x_rows, y): (Vec<Vec<f64>>, Vec<usize>) = match labels {
        Some(lp) => {
            let y = read_labels(lp)?;
            if y.len() != rows.len() {
                return Err(Error::Format(format!("{} labels for {} feature rows", y.len(), rows.len())));
            }
            (rows, y)
        }
        None => {
            let mut y = Vec::with_capacity(rows.len());
            let mut xs = Vec::with_capacity(rows.len());
            for (i, mut r) in rows.into_iter().enumerate() {
                let last = r.pop().ok_or_else(|| Error::Format(format!("{}: empty row {}", path.display(), i + 1)))?;
                if last < 0.0 || last.fract() != 0.0 {
                    return Err(Error::Format(format!("{}: label `{last}` in row {} is not a class id", path.display(), i + 1)));
                }
                y.push(last as usize);
                xs.push(r);
            }
            (xs, y)
        }
    };
    let converted: Vec<Vec<T>> = x_rows.into_iter().map(|r| r.into_iter().map(T::lit).collect()).collect();
    let x = Matrix::from_rows(&converted).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Dataset::from_labels(x, y)
}

/// Writes features as a raw payload plus sidecar header, in `T`'s native width.
pub fn write_features_bin<T: Real>(path: &Path, x: &Matrix<T>, n_classes: usize) -> Result<()> {
    let dtype = Dtype::native::<T>();
    let mut bytes = Vec::with_capacity(x.as_slice().len() * dtype.width());
    for &v in x.as_slice() {
        match dtype {
            Dtype::F32 => bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            Dtype::F64 => bytes.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    let header = FeatureHeader {
        format: default_format(),
        version: FEATURE_FORMAT_VERSION,
        n: x.rows(),
        d: x.cols(),
        dtype,
        endianness: "little".into(),
        n_classes,
    };
    fs::write(path, bytes)?;
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(header_path(path), json + "\n")?;
    Ok(())
}

/// Writes `features..., label` rows without a header line.
pub fn write_csv<T: Real>(path: &Path, dataset: &Dataset<T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for (row, &y) in dataset.features().row_iter().zip(dataset.labels()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.as_f64().to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b,label\n1.0,2.0,0\n3.0,4.0,1\n5,6,0\n").unwrap();
        let d: Dataset<f64> = load_dataset(&p, None).unwrap();
        assert_eq!((d.n(), d.dim(), d.n_classes()), (3, 2, 2));
        assert_eq!(d.features().row(2), &[5.0, 6.0]);
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let lp = dir.path().join("y.txt");
        let x = Matrix::from_rows(&[[1.5f64, -0.0], [f64::MIN_POSITIVE, 1e300]]).unwrap();
        write_features_bin(&p, &x, 3).unwrap();
        write_labels(&lp, &[2, 0]).unwrap();
        let d: Dataset<f64> = load_dataset(&p, Some(&lp)).unwrap();
        assert_eq!(d.features().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(d.n_classes(), 3);

        write_labels(&lp, &[3, 0]).unwrap();
        assert!(matches!(load_dataset::<f64>(&p, Some(&lp)), Err(Error::LabelRange { label: 3, n_classes: 3 })));

        let mut h: FeatureHeader = serde_json::from_slice(&fs::read(header_path(&p)).unwrap()).unwrap();
        h.n = 5;
        fs::write(header_path(&p), serde_json::to_string(&h).unwrap()).unwrap();
        assert!(matches!(load_dataset::<f64>(&p, Some(&lp)), Err(Error::Format(_))));
    }
}
