//! Regular 2-D grids, scalar fields sampled on them, and CSV / PGM export.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{FtmeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid2D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2D {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, nx: usize, ny: usize) -> Result<Self> {
        if ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(FtmeError::invalid("grid bounds must be finite"));
        }
        if !(x_max > x_min && y_max > y_min) {
            return Err(FtmeError::invalid("grid bounds must satisfy min < max"));
        }
        if nx < 2 || ny < 2 {
            return Err(FtmeError::invalid("grid needs at least 2 nodes per axis"));
        }
        Ok(Grid2D { x_min, x_max, y_min, y_max, nx, ny })
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / (self.ny - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    pub fn y(&self, j: usize) -> f64 {
        if j + 1 == self.ny {
            self.y_max
        } else {
            self.y_min + j as f64 * self.dy()
        }
    }

    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x(i), self.y(j))
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major index, `x` varying fastest.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }
}

impl FromStr for Grid2D {
    type Err = FtmeError;

    /// `xmin:xmax:ymin:ymax:NXxNY`
    fn from_str(s: &str) -> Result<Self> {
        let bad = || FtmeError::invalid(format!("grid spec `{s}` is not xmin:xmax:ymin:ymax:NXxNY"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let b: Vec<f64> = parts[..4]
            .iter()
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let (nx, ny) = parts[4].split_once(['x', 'X']).ok_or_else(bad)?;
        let nx = nx.trim().parse().map_err(|_| bad())?;
        let ny = ny.trim().parse().map_err(|_| bad())?;
        Grid2D::new(b[0], b[1], b[2], b[3], nx, ny)
    }
}

impl fmt::Display for Grid2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}:{}x{}",
            self.x_min, self.x_max, self.y_min, self.y_max, self.nx, self.ny
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    FtmeWeighted,
    FtleForward,
    FtleBackward,
    StretchingRate,
    Imported,
}

impl FieldKind {
    pub fn name(&self) -> &'static str {
        match self {
            FieldKind::FtmeWeighted => "ftme-weighted",
            FieldKind::FtleForward => "ftle-forward",
            FieldKind::FtleBackward => "ftle-backward",
            FieldKind::StretchingRate => "stretching-rate",
            FieldKind::Imported => "imported",
        }
    }
}

impl FromStr for FieldKind {
    type Err = FtmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ftme-weighted" => Ok(FieldKind::FtmeWeighted),
            "ftle-forward" => Ok(FieldKind::FtleForward),
            "ftle-backward" => Ok(FieldKind::FtleBackward),
            "stretching-rate" => Ok(FieldKind::StretchingRate),
            _ => Err(FtmeError::invalid(format!("unknown field kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldMeta {
    pub kind: FieldKind,
    pub horizon: Option<f64>,
    pub alpha_policy: Option<String>,
    pub seed: Option<u64>,
}

impl FieldMeta {
    pub fn new(kind: FieldKind) -> Self {
        FieldMeta {
            kind,
            horizon: None,
            alpha_policy: None,
            seed: None,
        }
    }
}

/// Values on a [`Grid2D`] with a validity mask (`true` = valid).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField2D {
    grid: Grid2D,
    values: Vec<f64>,
    mask: Vec<bool>,
    pub meta: FieldMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub valid: usize,
    pub total: usize,
}

impl ScalarField2D {
    pub fn new(grid: Grid2D, values: Vec<f64>, mask: Vec<bool>, meta: FieldMeta) -> Result<Self> {
        if values.len() != grid.len() || mask.len() != grid.len() {
            return Err(FtmeError::invalid("field data does not match grid size"));
        }
        if values.iter().zip(&mask).any(|(v, m)| *m && !v.is_finite()) {
            return Err(FtmeError::invalid("valid nodes must hold finite values"));
        }
        Ok(ScalarField2D { grid, values, mask, meta })
    }

    /// Builds a fully valid field by evaluating `f` at every node.
    pub fn from_fn(grid: Grid2D, meta: FieldMeta, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..grid.len())
            .map(|k| {
                let (i, j) = grid.coords(k);
                let (x, y) = grid.node(i, j);
                f(x, y)
            })
            .collect();
        ScalarField2D::new(grid, values, vec![true; grid.len()], meta)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.mask[self.grid.index(i, j)]
    }

    fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(v, _)| *v)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// `(min, max)` over valid nodes.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.valid_values().fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    pub fn summary(&self) -> Option<FieldSummary> {
        let (min, max) = self.range()?;
        let valid = self.valid_count();
        let mean = self.valid_values().sum::<f64>() / valid as f64;
        let var = self.valid_values().map(|v| (v - mean).powi(2)).sum::<f64>() / valid as f64;
        Some(FieldSummary {
            min,
            max,
            mean,
            std: var.sqrt(),
            valid,
            total: self.grid.len(),
        })
    }

    /// Value written for node `k` on export: masked nodes take the valid max.
    fn export_value(&self, k: usize, fill: f64) -> f64 {
        if self.mask[k] {
            self.values[k]
        } else {
            fill
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FtmeError + '_ {
    move |source| FtmeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const CSV_HEADER: &str = "x,y,value,valid";

/// Writes `x,y,value,valid` rows in row-major order with 17 significant digits.
pub fn export_csv(field: &ScalarField2D, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_csv(field, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_csv<W: Write>(field: &ScalarField2D, w: &mut W) -> std::io::Result<()> {
    let fill = field.range().map_or(0.0, |r| r.1);
    writeln!(w, "{CSV_HEADER}")?;
    for k in 0..field.grid.len() {
        let (i, j) = field.grid.coords(k);
        let (x, y) = field.grid.node(i, j);
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{}",
            x,
            y,
            field.export_value(k, fill),
            u8::from(field.mask[k])
        )?;
    }
    Ok(())
}

/// Reads a file written by [`export_csv`]; the grid is rebuilt from the
/// node coordinates.
pub fn import_csv(path: &Path) -> Result<ScalarField2D> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |line: usize, message: String| FtmeError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{CSV_HEADER}`"))),
    }
    let mut rows: Vec<(f64, f64, f64, bool)> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(parse_err(lineno, format!("expected 4 columns, found {}", cols.len())));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("bad number `{s}`: {e}")))
        };
        let valid = match cols[3].trim() {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(lineno, format!("valid flag must be 0 or 1, got `{other}`"))),
        };
        rows.push((num(cols[0])?, num(cols[1])?, num(cols[2])?, valid));
    }
    if rows.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let y0 = rows[0].1;
    let nx = rows.iter().take_while(|r| r.1 == y0).count();
    if nx < 2 || !rows.len().is_multiple_of(nx) {
        return Err(parse_err(rows.len() + 1, "ragged grid data".into()));
    }
    let ny = rows.len() / nx;
    let grid = Grid2D::new(rows[0].0, rows[nx - 1].0, y0, rows[rows.len() - 1].1, nx, ny)
        .map_err(|e| parse_err(2, e.to_string()))?;
    let tol = 1e-9 * (grid.x_max - grid.x_min).max(grid.y_max - grid.y_min);
    for (k, r) in rows.iter().enumerate() {
        let (i, j) = grid.coords(k);
        let (x, y) = grid.node(i, j);
        if (x - r.0).abs() > tol || (y - r.1).abs() > tol {
            return Err(parse_err(k + 2, "node coordinates do not form a regular grid".into()));
        }
    }
    let values = rows.iter().map(|r| r.2).collect();
    let mask = rows.iter().map(|r| r.3).collect();
    ScalarField2D::new(grid, values, mask, FieldMeta::new(FieldKind::Imported))
}

/// Writes an 8-bit binary PGM; image row 0 is the largest `y`.
///
/// Without `clip` the gray scale spans the valid-node range; a constant
/// field renders at mid gray. Masked nodes are black.
pub fn export_pgm(field: &ScalarField2D, path: &Path, clip: Option<(f64, f64)>) -> Result<()> {
    let bytes = pgm_bytes(field, clip)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn pgm_bytes(field: &ScalarField2D, clip: Option<(f64, f64)>) -> Result<Vec<u8>> {
    let (lo, hi) = match clip {
        Some((lo, hi)) => {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(FtmeError::invalid("PGM clip range needs finite lo < hi"));
            }
            (lo, hi)
        }
        None => match field.range() {
            Some((lo, hi)) if hi > lo => (lo, hi),
            Some((lo, _)) => (lo - 0.5, lo + 0.5),
            None => (0.0, 1.0),
        },
    };
    let g = field.grid;
    let mut out = format!("P5\n{} {}\n255\n", g.nx, g.ny).into_bytes();
    out.reserve(g.len());
    for j in (0..g.ny).rev() {
        for i in 0..g.nx {
            let k = g.index(i, j);
            let px = if field.mask[k] {
                (255.0 * (field.values[k] - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.push(px);
        }
    }
    Ok(out)
}
