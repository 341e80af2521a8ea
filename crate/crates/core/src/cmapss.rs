//! CMAPSS ingestion: parsing, feature selection, Z-normalization, piecewise
//! linear RUL targets and sliding windows.
//!
//! A CMAPSS record file has one line per (unit, cycle) with 26
//! whitespace-separated columns: unit id, cycle, 3 operational settings and
//! 21 sensor channels. The ground-truth file for a test set holds one integer
//! per unit, in unit order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::nn::{Sequence, SequenceSet};
use crate::{Error, Result};

pub const SETTING_COUNT: usize = 3;
pub const SENSOR_COUNT: usize = 21;
pub const COLUMN_COUNT: usize = 2 + SETTING_COUNT + SENSOR_COUNT;

/// One engine unit's raw record.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSeries {
    pub unit_id: u32,
    /// 1-based, consecutive.
    pub cycles: Vec<u32>,
    pub op_settings: Vec<[f64; SETTING_COUNT]>,
    pub sensors: Vec<[f64; SENSOR_COUNT]>,
    /// Cycles remaining after the last recorded one (test sets only).
    pub true_final_rul: Option<u32>,
}

impl UnitSeries {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    fn channel(&self, row: usize, channel: usize) -> f64 {
        if channel < SETTING_COUNT {
            self.op_settings[row][channel]
        } else {
            self.sensors[row][channel - SETTING_COUNT]
        }
    }
}

/// Parses a CMAPSS record file. Units come back in ascending id order.
pub fn parse_cmapss(text: &str) -> Result<Vec<UnitSeries>> {
    let mut units: BTreeMap<u32, UnitSeries> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != COLUMN_COUNT {
            return Err(Error::Parse {
                line,
                message: format!("expected {COLUMN_COUNT} fields, found {}", fields.len()),
            });
        }
        let unit_id = parse_index(fields[0], line, "unit id")?;
        let cycle = parse_index(fields[1], line, "cycle")?;
        let mut values = [0.0f64; SETTING_COUNT + SENSOR_COUNT];
        for (slot, token) in values.iter_mut().zip(&fields[2..]) {
            *slot = token.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric token `{token}`"),
            })?;
        }

        let unit = units.entry(unit_id).or_insert_with(|| UnitSeries {
            unit_id,
            cycles: Vec::new(),
            op_settings: Vec::new(),
            sensors: Vec::new(),
            true_final_rul: None,
        });
        let expected = unit.cycles.last().map_or(1, |c| c + 1);
        if cycle != expected {
            return Err(Error::Integrity(format!(
                "line {line}: unit {unit_id} has cycle {cycle}, expected {expected}"
            )));
        }
        unit.cycles.push(cycle);
        let mut settings = [0.0; SETTING_COUNT];
        settings.copy_from_slice(&values[..SETTING_COUNT]);
        let mut sensors = [0.0; SENSOR_COUNT];
        sensors.copy_from_slice(&values[SETTING_COUNT..]);
        unit.op_settings.push(settings);
        unit.sensors.push(sensors);
    }

    Ok(units.into_values().collect())
}

fn parse_index(token: &str, line: usize, what: &str) -> Result<u32> {
    token.parse::<u32>().map_err(|_| Error::Parse {
        line,
        message: format!("{what} `{token}` is not a non-negative integer"),
    })
}

/// Writes units back in the 26-column layout. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn format_cmapss(units: &[UnitSeries]) -> String {
    let mut out = String::new();
    for unit in units {
        for row in 0..unit.len() {
            let _ = write!(out, "{} {}", unit.unit_id, unit.cycles[row]);
            for v in unit.op_settings[row].iter().chain(unit.sensors[row].iter()) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Assigns the per-unit ground truth RUL file to `units`, line k to unit k.
pub fn load_true_rul(text: &str, units: &mut [UnitSeries]) -> Result<()> {
    let mut values = Vec::with_capacity(units.len());
    for (idx, raw) in text.lines().enumerate() {
        let token = raw.trim();
        if token.is_empty() {
            continue;
        }
        let value = token.parse::<u32>().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("RUL `{token}` is not a non-negative integer"),
        })?;
        values.push(value);
    }
    if values.len() != units.len() {
        return Err(Error::Integrity(format!(
            "ground truth has {} entries for {} units",
            values.len(),
            units.len()
        )));
    }
    for (unit, value) in units.iter_mut().zip(values) {
        unit.true_final_rul = Some(value);
    }
    Ok(())
}

/// Which raw channels are removed before modelling. Indices are 1-based, as
/// in the CMAPSS documentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub dropped_settings: Vec<u8>,
    pub dropped_sensors: Vec<u8>,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        Self {
            // Setting 3 is a constant 100.0 throughout FD001.
            dropped_settings: alloc::vec![3],
            dropped_sensors: alloc::vec![1, 5, 10, 16, 18, 19],
        }
    }
}

impl FeatureSelection {
    /// Column layout after dropping: settings first, then sensors, both in
    /// ascending index.
    pub fn layout(&self) -> Result<FeatureLayout> {
        for &s in &self.dropped_settings {
            if !(1..=SETTING_COUNT as u8).contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "setting index {s} outside 1..={SETTING_COUNT}"
                )));
            }
        }
        for &s in &self.dropped_sensors {
            if !(1..=SENSOR_COUNT as u8).contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "sensor index {s} outside 1..={SENSOR_COUNT}"
                )));
            }
        }
        let mut names = Vec::new();
        let mut channels = Vec::new();
        for k in 1..=SETTING_COUNT {
            if !self.dropped_settings.contains(&(k as u8)) {
                names.push(format!("setting_{k}"));
                channels.push(k - 1);
            }
        }
        for k in 1..=SENSOR_COUNT {
            if !self.dropped_sensors.contains(&(k as u8)) {
                names.push(format!("sensor_{k}"));
                channels.push(SETTING_COUNT + k - 1);
            }
        }
        if names.is_empty() {
            return Err(Error::InvalidArgument("every channel is dropped".to_string()));
        }
        Ok(FeatureLayout { names, channels })
    }
}

/// Retained feature names and the raw channel each one reads
/// (0..3 settings, 3..24 sensors).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub names: Vec<String>,
    pub channels: Vec<usize>,
}

impl FeatureLayout {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn sensor_count(&self) -> usize {
        self.channels.iter().filter(|&&c| c >= SETTING_COUNT).count()
    }
}

/// A unit reduced to its retained features, row-major `[len × n_features]`.
/// Cycles are implicitly `1..=len`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeatures {
    pub unit_id: u32,
    pub n_features: usize,
    pub values: Vec<f64>,
    pub true_final_rul: Option<u32>,
}

impl UnitFeatures {
    pub fn len(&self) -> usize {
        self.values.len() / self.n_features
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_features..(t + 1) * self.n_features]
    }

    /// Actual remaining cycles at each recorded cycle, when known: the last
    /// row has `true_final_rul`, each earlier row one more.
    pub fn true_rul_trace(&self) -> Option<Vec<f64>> {
        let last = self.true_final_rul? as f64;
        let len = self.len();
        Some((0..len).map(|t| last + (len - 1 - t) as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub layout: FeatureLayout,
    pub units: Vec<UnitFeatures>,
}

/// Applies a full feature selection to raw units.
pub fn select_features(units: &[UnitSeries], selection: &FeatureSelection) -> Result<FeatureTable> {
    let layout = selection.layout()?;
    Ok(project(units, layout))
}

/// Drops the listed sensors (1-based) and keeps all three settings.
pub fn drop_constant_sensors(units: &[UnitSeries], drop_list: &[u8]) -> Result<FeatureTable> {
    let selection = FeatureSelection {
        dropped_settings: Vec::new(),
        dropped_sensors: drop_list.to_vec(),
    };
    select_features(units, &selection)
}

fn project(units: &[UnitSeries], layout: FeatureLayout) -> FeatureTable {
    let n_features = layout.len();
    let units = units
        .iter()
        .map(|u| {
            let mut values = Vec::with_capacity(u.len() * n_features);
            for row in 0..u.len() {
                values.extend(layout.channels.iter().map(|&c| u.channel(row, c)));
            }
            UnitFeatures {
                unit_id: u.unit_id,
                n_features,
                values,
                true_final_rul: u.true_final_rul,
            }
        })
        .collect();
    FeatureTable { layout, units }
}

/// Per-feature Z-normalization statistics (population convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Mean and population standard deviation of every retained feature over
/// all training rows.
pub fn fit_norm_stats(table: &FeatureTable) -> Result<NormStats> {
    let n_features = table.layout.len();
    let rows: usize = table.units.iter().map(UnitFeatures::len).sum();
    if rows < 2 {
        return Err(Error::Degenerate(format!(
            "normalization needs at least 2 rows, got {rows}"
        )));
    }
    let mut mean = Vec::with_capacity(n_features);
    let mut std = Vec::with_capacity(n_features);
    for (j, name) in table.layout.names.iter().enumerate() {
        let column = table
            .units
            .iter()
            .flat_map(|u| u.values.iter().skip(j).step_by(n_features).copied());
        let (m, var) = math::mean_and_population_variance(column);
        if !m.is_finite() || !var.is_finite() {
            return Err(Error::NonFinite(format!("training feature `{name}`")));
        }
        let s = math::sqrt(var);
        if s <= 0.0 {
            return Err(Error::ConstantFeature { name: name.clone() });
        }
        mean.push(m);
        std.push(s);
    }
    Ok(NormStats {
        names: table.layout.names.clone(),
        mean,
        std,
    })
}

fn check_stats(table: &FeatureTable, stats: &NormStats) -> Result<()> {
    if table.layout.names != stats.names {
        return Err(Error::FeatureMismatch(format!(
            "data has features {:?}, statistics cover {:?}",
            table.layout.names, stats.names
        )));
    }
    Ok(())
}

fn map_values(
    table: &FeatureTable,
    stats: &NormStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<FeatureTable> {
    check_stats(table, stats)?;
    let n = stats.len();
    let units = table
        .units
        .iter()
        .map(|u| {
            let values = u
                .values
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, stats.mean[i % n], stats.std[i % n]))
                .collect();
            UnitFeatures { values, ..u.clone() }
        })
        .collect();
    Ok(FeatureTable {
        layout: table.layout.clone(),
        units,
    })
}

/// `(x − μ) / σ` with the supplied (training-set) statistics.
pub fn apply_norm(table: &FeatureTable, stats: &NormStats) -> Result<FeatureTable> {
    map_values(table, stats, |x, m, s| (x - m) / s)
}

/// Inverse of [`apply_norm`].
pub fn invert_norm(table: &FeatureTable, stats: &NormStats) -> Result<FeatureTable> {
    map_values(table, stats, |z, m, s| z * s + m)
}

/// Piecewise-linear target for a run-to-failure unit of `len` cycles:
/// `min(rul_cap, last_cycle − c)`.
pub fn make_rul_targets(len: usize, rul_cap: u32) -> Vec<f64> {
    let cap = rul_cap as usize;
    (1..=len).map(|c| (len - c).min(cap) as f64).collect()
}

/// Number of full windows: `floor((len − l) / s) + 1` when `len ≥ l`.
pub fn window_count(len: usize, window_length: usize, stride: usize) -> usize {
    if window_length == 0 || stride == 0 || len < window_length {
        0
    } else {
        (len - window_length) / stride + 1
    }
}

/// A fixed-length slice of one unit plus its per-step targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub unit_id: u32,
    /// 1-based cycle of the last row.
    pub end_cycle: u32,
    pub n_features: usize,
    /// Row-major `[window_length × n_features]`.
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl WindowSample {
    pub fn window_length(&self) -> usize {
        self.targets.len()
    }
}

fn check_window_args(window_length: usize, stride: usize) -> Result<()> {
    if window_length == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "window length ({window_length}) and stride ({stride}) must be at least 1"
        )));
    }
    Ok(())
}

/// Full-length windows starting at `0, stride, 2·stride, …`. Units shorter
/// than the window produce none.
pub fn window_slices(
    unit: &UnitFeatures,
    targets: &[f64],
    window_length: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    check_window_args(window_length, stride)?;
    if targets.len() != unit.len() {
        return Err(Error::InvalidArgument(format!(
            "unit {} has {} rows but {} targets",
            unit.unit_id,
            unit.len(),
            targets.len()
        )));
    }
    let f = unit.n_features;
    let count = window_count(unit.len(), window_length, stride);
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            let end = start + window_length;
            WindowSample {
                unit_id: unit.unit_id,
                end_cycle: end as u32,
                n_features: f,
                inputs: unit.values[start * f..end * f].to_vec(),
                targets: targets[start..end].to_vec(),
            }
        })
        .collect())
}

impl SequenceSet for [WindowSample] {
    fn len(&self) -> usize {
        <[WindowSample]>::len(self)
    }

    fn sequence(&self, index: usize) -> Sequence<'_> {
        let w = &self[index];
        Sequence {
            inputs: &w.inputs,
            targets: &w.targets,
            n_features: w.n_features,
        }
    }
}

impl SequenceSet for Vec<WindowSample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn sequence(&self, index: usize) -> Sequence<'_> {
        self.as_slice().sequence(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    /// Index into [`TrainingWindows::units`].
    pub unit: usize,
    /// First row of the window.
    pub start: usize,
}

/// Training windows as spans over normalized unit histories. Equivalent to a
/// `Vec<WindowSample>` without copying every row `window_length` times.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindows {
    pub window_length: usize,
    pub n_features: usize,
    pub units: Vec<UnitFeatures>,
    pub targets: Vec<Vec<f64>>,
    pub spans: Vec<WindowSpan>,
}

impl TrainingWindows {
    /// Builds spans for every unit long enough for one window and returns the
    /// ids of units that were too short.
    pub fn new(
        units: Vec<UnitFeatures>,
        targets: Vec<Vec<f64>>,
        window_length: usize,
        stride: usize,
    ) -> Result<(Self, Vec<u32>)> {
        check_window_args(window_length, stride)?;
        if units.len() != targets.len() {
            return Err(Error::InvalidArgument(
                "one target vector per unit is required".to_string(),
            ));
        }
        let n_features = units.first().map_or(0, |u| u.n_features);
        let mut spans = Vec::new();
        let mut skipped = Vec::new();
        for (ui, (unit, t)) in units.iter().zip(&targets).enumerate() {
            if unit.n_features != n_features || t.len() != unit.len() {
                return Err(Error::InvalidArgument(format!(
                    "unit {} has inconsistent shape",
                    unit.unit_id
                )));
            }
            let count = window_count(unit.len(), window_length, stride);
            if count == 0 {
                skipped.push(unit.unit_id);
            }
            spans.extend((0..count).map(|k| WindowSpan {
                unit: ui,
                start: k * stride,
            }));
        }
        Ok((
            Self {
                window_length,
                n_features,
                units,
                targets,
                spans,
            },
            skipped,
        ))
    }

    pub fn materialize(&self, index: usize) -> WindowSample {
        let span = self.spans[index];
        let seq = self.sequence(index);
        WindowSample {
            unit_id: self.units[span.unit].unit_id,
            end_cycle: (span.start + self.window_length) as u32,
            n_features: self.n_features,
            inputs: seq.inputs.to_vec(),
            targets: seq.targets.to_vec(),
        }
    }
}

impl SequenceSet for TrainingWindows {
    fn len(&self) -> usize {
        self.spans.len()
    }

    fn sequence(&self, index: usize) -> Sequence<'_> {
        let WindowSpan { unit, start } = self.spans[index];
        let end = start + self.window_length;
        let f = self.n_features;
        Sequence {
            inputs: &self.units[unit].values[start * f..end * f],
            targets: &self.targets[unit][start..end],
            n_features: f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub window_length: usize,
    pub stride: usize,
    pub rul_cap: u32,
    pub dropped_settings: Vec<u8>,
    pub dropped_sensors: Vec<u8>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let selection = FeatureSelection::default();
        Self {
            window_length: 100,
            stride: 1,
            rul_cap: 128,
            dropped_settings: selection.dropped_settings,
            dropped_sensors: selection.dropped_sensors,
        }
    }
}

impl PreprocessConfig {
    pub fn selection(&self) -> FeatureSelection {
        FeatureSelection {
            dropped_settings: self.dropped_settings.clone(),
            dropped_sensors: self.dropped_sensors.clone(),
        }
    }
}

/// Everything the models need from one CMAPSS subset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub config: PreprocessConfig,
    pub layout: FeatureLayout,
    pub norm_stats: NormStats,
    pub train: TrainingWindows,
    /// Full histories normalized with the training statistics.
    pub test_units: Vec<UnitFeatures>,
    /// Training units shorter than one window.
    pub skipped_train_units: Vec<u32>,
}

/// Feature selection, normalization fitted on `train` only, targets and
/// windows.
pub fn prepare_split(
    train: &[UnitSeries],
    test: &[UnitSeries],
    config: &PreprocessConfig,
) -> Result<DatasetSplit> {
    check_window_args(config.window_length, config.stride)?;
    let selection = config.selection();
    let train_table = select_features(train, &selection)?;
    let norm_stats = fit_norm_stats(&train_table)?;
    let train_norm = apply_norm(&train_table, &norm_stats)?;
    let test_units = normalize_units(test, &selection, &norm_stats)?;

    let targets = train_norm
        .units
        .iter()
        .map(|u| make_rul_targets(u.len(), config.rul_cap))
        .collect();
    let (windows, skipped) = TrainingWindows::new(
        train_norm.units,
        targets,
        config.window_length,
        config.stride,
    )?;
    for id in &skipped {
        log::warn!(
            "training unit {id} is shorter than the window length {}; skipped",
            config.window_length
        );
    }
    Ok(DatasetSplit {
        config: config.clone(),
        layout: train_norm.layout,
        norm_stats,
        train: windows,
        test_units,
        skipped_train_units: skipped,
    })
}

/// Selects features and normalizes with existing statistics, e.g. a test set
/// scored by a model trained elsewhere.
pub fn normalize_units(
    units: &[UnitSeries],
    selection: &FeatureSelection,
    stats: &NormStats,
) -> Result<Vec<UnitFeatures>> {
    let table = select_features(units, selection)?;
    Ok(apply_norm(&table, stats)?.units)
}
