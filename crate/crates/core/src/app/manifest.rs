//! Dataset manifests: a header row naming `id`, `mofid`, `cif_path` and
//! `target` columns (any subset, any order). Rows are numbered from 1 after
//! the header.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub row: usize,
    pub id: String,
    pub mofid: Option<String>,
    /// Resolved against the manifest's directory.
    pub cif_path: Option<PathBuf>,
    pub target: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Mofid,
    CifPath,
    Target,
}

impl Column {
    fn name(self) -> &'static str {
        match self {
            Column::Mofid => "mofid",
            Column::CifPath => "cif_path",
            Column::Target => "target",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let tsv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(if tsv { b'\t' } else { b',' })
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::data(path, e.to_string()))?;
        let headers = reader.headers().map_err(|e| Error::data(path, e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (id_col, mofid_col, cif_col, target_col) = (col("id"), col("mofid"), col("cif_path"), col("target"));
        let base = path.parent().unwrap_or(Path::new("."));

        let mut rows = Vec::new();
        for (k, record) in reader.records().enumerate() {
            let row = k + 1;
            let record = record.map_err(|e| Error::data(path, format!("row {row}: {e}")))?;
            let cell = |c: Option<usize>| c.and_then(|c| record.get(c)).filter(|s| !s.is_empty()).map(str::to_string);
            let target = match cell(target_col) {
                None => None,
                Some(s) => Some(
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::data(path, format!("row {row}: target {s:?} is not a finite number")))?,
                ),
            };
            rows.push(ManifestRow {
                row,
                id: cell(id_col).unwrap_or_else(|| format!("row{row}")),
                mofid: cell(mofid_col),
                cif_path: cell(cif_col).map(|p| base.join(p)),
                target,
            });
        }
        Ok(Manifest { path: path.to_path_buf(), rows })
    }

    /// Fails on the first row lacking one of `columns` (or whose CIF file is
    /// missing), naming the row.
    pub fn require(&self, columns: &[Column]) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::data(&self.path, "manifest has no rows"));
        }
        for r in &self.rows {
            for &c in columns {
                let present = match c {
                    Column::Mofid => r.mofid.is_some(),
                    Column::CifPath => r.cif_path.is_some(),
                    Column::Target => r.target.is_some(),
                };
                if !present {
                    return Err(Error::data(&self.path, format!("row {}: missing {}", r.row, c.name())));
                }
                if let (Column::CifPath, Some(p)) = (c, &r.cif_path) {
                    if !p.is_file() {
                        return Err(Error::data(
                            &self.path,
                            format!("row {}: cif_path {} does not exist", r.row, p.display()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
