//! Series ingestion, lag windows and chronological splits.
//!
//! A [`SeriesTable`] holds normalized power for one or more sites on a uniform
//! time grid, with `NaN` marking missing cells. [`make_windows`] turns it into
//! logit-space vectors `[target lags, auxiliary lags..., target at t+k]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime};
use rand_distr::{Distribution, StandardNormal};

use crate::dist::LogitTransform;
use crate::error::{Error, Result};
use crate::missing::{Mask, MaskGrid};
use crate::rng;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Parses ISO-8601 timestamps with or without a UTC offset. Offsets are
/// converted to UTC.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Power series on a uniform grid; column-major, `NaN` = missing.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    timestamps: Vec<NaiveDateTime>,
    step: Duration,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl SeriesTable {
    /// Validates the grid and value ranges.
    pub fn new(timestamps: Vec<NaiveDateTime>, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() || names.is_empty() {
            return Err(Error::Data(format!(
                "{} site names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != timestamps.len() {
                return Err(Error::Data(format!(
                    "column {name} has {} rows, expected {}",
                    col.len(),
                    timestamps.len()
                )));
            }
            if let Some((r, v)) = col.iter().enumerate().find(|(_, v)| !v.is_nan() && !(0.0..=1.0).contains(*v)) {
                return Err(Error::Data(format!("row {r}, column {name}: value {v} outside [0, 1]")));
            }
        }
        let step = check_grid(&timestamps, |r| format!("row {r}"))?;
        Ok(Self {
            timestamps,
            step,
            names,
            columns,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_sites(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn step(&self) -> Duration {
        self.step
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.columns[c]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn is_missing(&self, r: usize, c: usize) -> bool {
        self.columns[c][r].is_nan()
    }

    pub fn mask_grid(&self) -> MaskGrid {
        let mut grid = MaskGrid::new(self.n_rows(), self.n_sites());
        for (c, col) in self.columns.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                grid.set(r, c, v.is_nan());
            }
        }
        grid
    }

    pub fn missing_rate(&self) -> f64 {
        self.mask_grid().missing_rate()
    }

    /// Copy with every cell flagged in `grid` set missing.
    pub fn with_mask(&self, grid: &MaskGrid) -> Result<Self> {
        if grid.rows() != self.n_rows() || grid.cols() != self.n_sites() {
            return Err(Error::shape(
                "with_mask",
                format!(
                    "mask {}x{} for table {}x{}",
                    grid.rows(),
                    grid.cols(),
                    self.n_rows(),
                    self.n_sites()
                ),
            ));
        }
        let mut out = self.clone();
        for (c, col) in out.columns.iter_mut().enumerate() {
            for (r, v) in col.iter_mut().enumerate() {
                if grid.get(r, c) {
                    *v = f64::NAN;
                }
            }
        }
        Ok(out)
    }

    /// Rows `start..end` as a new table.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_rows() {
            return Err(Error::invalid(format!("row range {start}..{end} of {}", self.n_rows())));
        }
        Ok(Self {
            timestamps: self.timestamps[start..end].to_vec(),
            step: self.step,
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c[start..end].to_vec()).collect(),
        })
    }

    /// Writes `timestamp,<sites...>` with empty cells for missing values.
    /// `preamble` lines are emitted first, each prefixed with `# `.
    pub fn write_csv(&self, path: &Path, preamble: &[String]) -> Result<()> {
        self.write_grid(path, preamble, |r, c| {
            let v = self.columns[c][r];
            if v.is_nan() {
                String::new()
            } else {
                format!("{v}")
            }
        })
    }

    /// Mask file with the same header as the data file; 1 = missing.
    pub fn write_mask_csv(&self, path: &Path, preamble: &[String]) -> Result<()> {
        self.write_grid(path, preamble, |r, c| {
            if self.columns[c][r].is_nan() { "1" } else { "0" }.to_string()
        })
    }

    fn write_grid(&self, path: &Path, preamble: &[String], cell: impl Fn(usize, usize) -> String) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        write_preamble(&mut out, preamble).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (r, t) in self.timestamps.iter().enumerate() {
            let mut rec = vec![format_timestamp(t)];
            rec.extend((0..self.n_sites()).map(|c| cell(r, c)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub(crate) fn write_preamble(out: &mut impl Write, preamble: &[String]) -> std::io::Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

fn check_grid(timestamps: &[NaiveDateTime], locate: impl Fn(usize) -> String) -> Result<Duration> {
    if timestamps.len() < 2 {
        return Ok(Duration::hours(1));
    }
    let step = timestamps[1] - timestamps[0];
    for (i, pair) in timestamps.windows(2).enumerate() {
        let d = pair[1] - pair[0];
        if d == Duration::zero() {
            return Err(Error::Data(format!(
                "{}: duplicated timestamp {}",
                locate(i + 1),
                format_timestamp(&pair[1])
            )));
        }
        if d < Duration::zero() {
            return Err(Error::Data(format!(
                "{}: timestamp {} goes backwards",
                locate(i + 1),
                format_timestamp(&pair[1])
            )));
        }
        if d != step {
            return Err(Error::Data(format!(
                "{}: timestamp {} breaks the uniform grid (step {}s, got {}s)",
                locate(i + 1),
                format_timestamp(&pair[1]),
                step.num_seconds(),
                d.num_seconds()
            )));
        }
    }
    Ok(step)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_cell(raw: &str) -> Option<f64> {
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
        Some(f64::NAN)
    } else {
        raw.parse().ok()
    }
}

/// Reads `timestamp,site...[,mask_<site>...]`. Empty cells or `NaN` are
/// missing; a mask column (`mask_0` pairs with `site_0`, `mask_x` with `x`)
/// with value 1 also marks the cell missing.
pub fn load_csv(path: &Path) -> Result<SeriesTable> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("timestamp") {
        return Err(Error::Data(format!(
            "{}: first column must be `timestamp`",
            path.display()
        )));
    }
    let mut site_cols = Vec::new();
    let mut mask_cols = Vec::new();
    for (i, name) in header.iter().enumerate().skip(1) {
        match name.strip_prefix("mask_") {
            Some(suffix) => mask_cols.push((i, suffix.to_string())),
            None => site_cols.push((i, name.clone())),
        }
    }
    if site_cols.is_empty() {
        return Err(Error::Data(format!("{}: no site columns", path.display())));
    }
    // mask column -> site position
    let mut mask_map = Vec::new();
    for (i, suffix) in &mask_cols {
        let site = site_cols
            .iter()
            .position(|(_, n)| *n == format!("site_{suffix}") || n == suffix)
            .ok_or_else(|| Error::Data(format!("mask column mask_{suffix} has no matching site column")))?;
        mask_map.push((*i, site));
    }

    let mut timestamps = Vec::new();
    let mut lines = Vec::new();
    let mut columns = vec![Vec::new(); site_cols.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "line {line}: {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let t = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::Data(format!("line {line}: cannot parse timestamp `{}`", &rec[0])))?;
        timestamps.push(t);
        lines.push(line);
        for (s, (i, name)) in site_cols.iter().enumerate() {
            let v = parse_cell(&rec[*i])
                .ok_or_else(|| Error::Data(format!("line {line}, column {name}: cannot parse `{}`", &rec[*i])))?;
            if !v.is_nan() && !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("line {line}, column {name}: value {v} outside [0, 1]")));
            }
            columns[s].push(v);
        }
        for &(i, s) in &mask_map {
            match &rec[i] {
                "0" | "" => {}
                "1" => *columns[s].last_mut().expect("pushed above") = f64::NAN,
                other => {
                    return Err(Error::Data(format!(
                        "line {line}, column {}: mask value `{other}` is not 0/1",
                        header[i]
                    )))
                }
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    check_grid(&timestamps, |r| format!("line {}", lines[r]))?;
    SeriesTable::new(timestamps, site_cols.into_iter().map(|(_, n)| n).collect(), columns)
}

/// Reads a 0/1 mask file whose header and timestamps match `table`.
pub fn load_mask_csv(path: &Path, table: &SeriesTable) -> Result<MaskGrid> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut expect = vec!["timestamp".to_string()];
    expect.extend(table.names().iter().cloned());
    if header != expect {
        return Err(Error::Data(format!(
            "{}: mask header {:?} does not match data header {:?}",
            path.display(),
            header,
            expect
        )));
    }
    let mut grid = MaskGrid::new(table.n_rows(), table.n_sites());
    let mut r = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if r >= table.n_rows() {
            return Err(Error::Data(format!("line {line}: mask has more rows than the data")));
        }
        if parse_timestamp(&rec[0]) != Some(table.timestamps()[r]) {
            return Err(Error::Data(format!("line {line}: mask timestamp `{}` misaligned", &rec[0])));
        }
        for c in 0..table.n_sites() {
            match &rec[c + 1] {
                "0" => {}
                "1" => grid.set(r, c, true),
                other => return Err(Error::Data(format!("line {line}: mask value `{other}` is not 0/1"))),
            }
        }
        r += 1;
    }
    if r != table.n_rows() {
        return Err(Error::Data(format!("mask has {r} rows, data has {}", table.n_rows())));
    }
    Ok(grid)
}

/// One joint vector `z_t`: logit values (`NaN` where missing), oldest to
/// newest per site, target last.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub values: Vec<f64>,
    pub mask: Mask,
    /// Row index of the newest lag `t`.
    pub origin: usize,
    pub lead: usize,
    pub h: usize,
}

impl Window {
    /// Window from explicit logit values; `NaN` entries become missing.
    pub fn from_values(values: Vec<f64>, origin: usize, lead: usize, h: usize) -> Self {
        let mask = Mask::new(values.iter().map(|v| v.is_nan()).collect());
        Self {
            values,
            mask,
            origin,
            lead,
            h,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn target_index(&self) -> usize {
        self.origin + self.lead
    }

    pub fn target_missing(&self) -> bool {
        self.mask.is_missing(self.dim() - 1)
    }

    /// Target in power space, if observed.
    pub fn target_power(&self, transform: &LogitTransform) -> Option<f64> {
        (!self.target_missing()).then(|| transform.inverse(self.values[self.dim() - 1]))
    }

    /// Feature coordinates (all but the target), logit space, `NaN` if missing.
    pub fn features(&self) -> &[f64] {
        &self.values[..self.dim() - 1]
    }

    /// Copy with the target flagged missing, as at forecast time.
    pub fn with_target_hidden(&self) -> Self {
        let mut w = self.clone();
        let last = w.dim() - 1;
        w.values[last] = f64::NAN;
        w.mask.set_missing(last, true);
        w
    }
}

/// All windows with `h` lags of each site in `sites` (the first is the
/// target) and the target `lead` steps ahead.
pub fn make_windows(table: &SeriesTable, h: usize, lead: usize, sites: &[usize]) -> Result<Vec<Window>> {
    if h == 0 || lead == 0 {
        return Err(Error::invalid(format!("h and lead must be at least 1 (h {h}, lead {lead})")));
    }
    if sites.is_empty() {
        return Err(Error::invalid("no sites selected"));
    }
    if let Some(&s) = sites.iter().find(|&&s| s >= table.n_sites()) {
        return Err(Error::invalid(format!("site index {s} out of range ({} sites)", table.n_sites())));
    }
    let n = table.n_rows();
    if n < h + lead {
        return Err(Error::Data(format!("table has {n} rows, need at least h + lead = {}", h + lead)));
    }
    let tf = LogitTransform::default();
    let to_logit = |v: f64| if v.is_nan() { f64::NAN } else { tf.forward(v) };
    let target = table.column(sites[0]);
    let windows = (h - 1..n - lead)
        .map(|t| {
            let mut values = Vec::with_capacity(sites.len() * h + 1);
            for &s in sites {
                values.extend(table.column(s)[t + 1 - h..=t].iter().map(|&v| to_logit(v)));
            }
            values.push(to_logit(target[t + lead]));
            Window::from_values(values, t, lead, h)
        })
        .collect();
    Ok(windows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

/// First `round(frac * n)` windows train, the rest test. Train windows whose
/// target lies after the origin of the first test window move to test.
pub fn chronological_split(windows: &[Window], spec: SplitSpec) -> Result<(Vec<Window>, Vec<Window>)> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::invalid(format!("train fraction {} outside [0, 1]", spec.train_fraction)));
    }
    if windows.windows(2).any(|p| p[1].origin <= p[0].origin) {
        return Err(Error::invalid("windows are not in time order"));
    }
    let n = windows.len();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "train fraction {} on {n} windows leaves an empty side",
            spec.train_fraction
        )));
    }
    let cut = windows[n_train].origin;
    let (train, mut spill): (Vec<Window>, Vec<Window>) =
        windows[..n_train].iter().cloned().partition(|w| w.target_index() <= cut);
    if train.is_empty() {
        return Err(Error::invalid("no training window ends before the cut"));
    }
    spill.extend_from_slice(&windows[n_train..]);
    Ok((train, spill))
}

/// Parameters of the synthetic logit-space AR(2) benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Ar2Config {
    pub n: usize,
    pub phi: (f64, f64),
    pub mean: f64,
    pub noise_std: f64,
    /// Auxiliary sites observe the target process one step ahead plus noise.
    pub aux_sites: usize,
    pub aux_noise_std: f64,
    pub seed: u64,
}

impl Default for Ar2Config {
    fn default() -> Self {
        Self {
            n: 5000,
            phi: (1.5, -0.6),
            mean: -1.0,
            noise_std: 0.3,
            aux_sites: 0,
            aux_noise_std: 0.3,
            seed: 0,
        }
    }
}

/// Hourly series starting 2020-01-01 with power `sigmoid(x_t)`, where `x_t`
/// is a stationary AR(2) around `mean`.
pub fn synthetic_ar2(cfg: &Ar2Config) -> Result<SeriesTable> {
    if cfg.n == 0 {
        return Err(Error::invalid("synthetic series needs n >= 1"));
    }
    let mut rng = rng::stream(cfg.seed, 0);
    let burn_in = 500;
    let (p1, p2) = cfg.phi;
    let mut x = Vec::with_capacity(cfg.n + burn_in + 1);
    let (mut a, mut b) = (0.0, 0.0);
    for _ in 0..cfg.n + burn_in + 1 {
        let e: f64 = StandardNormal.sample(&mut rng);
        let next = p1 * a + p2 * b + cfg.noise_std * e;
        b = a;
        a = next;
        x.push(cfg.mean + next);
    }
    let x = &x[burn_in..];
    let tf = LogitTransform::default();
    let mut names = vec!["site_0".to_string()];
    let mut columns = vec![x[..cfg.n].iter().map(|&v| tf.inverse(v)).collect::<Vec<_>>()];
    for j in 0..cfg.aux_sites {
        let mut aux_rng = rng::stream(cfg.seed, 1 + j as u64);
        names.push(format!("site_{}", j + 1));
        columns.push(
            (0..cfg.n)
                .map(|t| {
                    let e: f64 = StandardNormal.sample(&mut aux_rng);
                    tf.inverse(x[t + 1] + cfg.aux_noise_std * e)
                })
                .collect(),
        );
    }
    let start = NaiveDateTime::parse_from_str("2020-01-01T00:00:00", TIMESTAMP_FORMAT).expect("valid literal");
    let timestamps = (0..cfg.n).map(|i| start + Duration::hours(i as i64)).collect();
    SeriesTable::new(timestamps, names, columns)
}
