//! Text formats: metrics ingestion, canonical lookup-table files and
//! plot-ready report series.
//!
//! Metrics files are comma-separated with a leading schema line:
//!
//! ```text
//! schema=froc-metrics/1
//! config_id,method,learning_rate,ascent_steps,forget_loss,forget_acc,retain_loss,retain_acc
//! ```
//!
//! Per-sample files use `schema=froc-samples/1` and the columns
//! `config_id,sample_id,split,loss,correct`.
//!
//! Table files are line oriented. Every real is rendered with the shortest
//! decimal that round-trips binary64, entries are sorted by id and the file
//! ends with a SHA-256 of everything before the checksum line, so equal
//! tables always serialize to identical bytes and the reader accepts only
//! canonical text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use sha2::{Digest, Sha256};

use crate::conformal::{conformal_unlearning_risk, ReferenceStats, RiskBudget};
use crate::controller::{EntryMode, LookupTable, TableEntry};
use crate::error::{FrocError, Result};
use crate::risk_model::{
    clamp_loss, ConfigMetrics, Method, RiskBreakdown, RiskWeights, SampleRecord, Split, Squash,
    UnlearningConfig,
};

pub const METRICS_SCHEMA: &str = "froc-metrics/1";
pub const SAMPLES_SCHEMA: &str = "froc-samples/1";
pub const TABLE_SCHEMA: &str = "froc-table/1";
pub const REPORT_SCHEMA: &str = "froc-report/1";

pub const METRICS_COLUMNS: [&str; 8] = [
    "config_id",
    "method",
    "learning_rate",
    "ascent_steps",
    "forget_loss",
    "forget_acc",
    "retain_loss",
    "retain_acc",
];
pub const SAMPLE_COLUMNS: [&str; 5] = ["config_id", "sample_id", "split", "loss", "correct"];

/// Shortest round-tripping decimal; scientific notation outside `[1e-5, 1e16)`.
pub fn format_real(value: f64) -> String {
    let magnitude = value.abs();
    if magnitude != 0.0 && !(1e-5..1e16).contains(&magnitude) {
        format!("{value:e}")
    } else {
        format!("{value}")
    }
}

fn parse_error(line: u64, column: usize, message: impl Into<String>) -> FrocError {
    FrocError::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn relocate(err: FrocError, line: u64, column: usize) -> FrocError {
    match err {
        FrocError::Parse { .. } => err,
        other => parse_error(line, column, other.to_string()),
    }
}

fn parse_finite(token: &str, field: &str, line: u64, column: usize) -> Result<f64> {
    match token.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_error(
            line,
            column,
            format!("field `{field}`: `{token}` is not a finite number"),
        )),
    }
}

/// Reads the schema line and hands back a reader positioned after it.
fn read_schema<R: Read>(source: R, expected: &str) -> Result<BufReader<R>> {
    let mut reader = BufReader::new(source);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| FrocError::io(e, 0))?;
    let first = first.trim_end_matches(['\r', '\n']);
    let Some(found) = first.strip_prefix("schema=") else {
        return Err(parse_error(1, 1, format!("expected `schema={expected}` header")));
    };
    if found != expected {
        return Err(FrocError::Version {
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(reader)
}

struct Columns {
    index: Vec<usize>,
}

impl Columns {
    fn locate(header: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let index = required
            .iter()
            .map(|name| {
                header
                    .iter()
                    .position(|h| h.trim() == *name)
                    .ok_or_else(|| parse_error(2, 1, format!("missing required column `{name}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { index })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, which: usize, line: u64) -> Result<&'r str> {
        record
            .get(self.index[which])
            .ok_or_else(|| parse_error(line, self.index[which] + 1, "row is too short"))
    }
}

fn csv_rows<R: Read>(reader: BufReader<R>) -> csv::Reader<BufReader<R>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

/// Parsed metrics file: grid configurations, their metrics and any warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub configs: Vec<UnlearningConfig>,
    pub metrics: Vec<ConfigMetrics>,
    pub warnings: Vec<String>,
}

/// Parses an aggregate metrics file.
pub fn parse_metrics<R: Read>(source: R) -> Result<MetricsFile> {
    let mut rows = csv_rows(read_schema(source, METRICS_SCHEMA)?);
    let header = rows
        .headers()
        .map_err(|e| parse_error(2, 1, e.to_string()))?
        .clone();
    let columns = Columns::locate(&header, &METRICS_COLUMNS)?;
    let mut out = MetricsFile {
        configs: Vec::new(),
        metrics: Vec::new(),
        warnings: Vec::new(),
    };
    for record in rows.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() + 1);
            parse_error(line, 1, e.to_string())
        })?;
        // csv counts from the header line; the schema line precedes it.
        let line = record.position().map_or(0, |p| p.line() + 1);
        let col = |i: usize| columns.index[i] + 1;
        let field = |i: usize| columns.get(&record, i, line);

        let id = field(0)?.to_string();
        let method = Method::parse(field(1)?).map_err(|e| relocate(e, line, col(1)))?;
        let learning_rate = parse_finite(field(2)?, METRICS_COLUMNS[2], line, col(2))?;
        let steps_token = field(3)?;
        let ascent_steps: u32 = steps_token.parse().map_err(|_| {
            parse_error(
                line,
                col(3),
                format!("field `ascent_steps`: `{steps_token}` is not a positive integer"),
            )
        })?;
        let mut values = [0.0f64; 4];
        for (slot, i) in (4..8).enumerate() {
            values[slot] = parse_finite(field(i)?, METRICS_COLUMNS[i], line, col(i))?;
        }
        for (slot, i) in [(0usize, 4usize), (2, 6)] {
            let (clamped, was_clamped) = clamp_loss(values[slot]).map_err(|_| {
                parse_error(
                    line,
                    col(i),
                    format!("field `{}` must be non-negative, got {}", METRICS_COLUMNS[i], values[slot]),
                )
            })?;
            if was_clamped {
                out.warnings.push(format!(
                    "line {line}: config `{id}` {} = {} clamped to {}",
                    METRICS_COLUMNS[i], values[slot], clamped
                ));
            }
            values[slot] = clamped;
        }
        for i in [5usize, 7] {
            let v = values[i - 4];
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_error(
                    line,
                    col(i),
                    format!("field `{}` must lie in [0, 1], got {v}", METRICS_COLUMNS[i]),
                ));
            }
        }
        let config = UnlearningConfig::new(id.clone(), method, learning_rate, ascent_steps)
            .map_err(|e| relocate(e, line, col(0)))?;
        let metrics = ConfigMetrics::new(id, values[0], values[1], values[2], values[3])
            .map_err(|e| relocate(e, line, col(0)))?;
        if out.configs.iter().any(|c| c.id == config.id) {
            return Err(parse_error(
                line,
                col(0),
                format!("duplicate config id `{}`", config.id),
            ));
        }
        out.configs.push(config);
        out.metrics.push(metrics);
    }
    if out.metrics.is_empty() {
        return Err(FrocError::Config("metrics file has no data rows".into()));
    }
    Ok(out)
}

/// Per-sample records keyed by config id, in file order.
pub type SampleTable = BTreeMap<String, Vec<SampleRecord>>;

pub fn parse_samples<R: Read>(source: R) -> Result<(SampleTable, Vec<String>)> {
    let mut rows = csv_rows(read_schema(source, SAMPLES_SCHEMA)?);
    let header = rows
        .headers()
        .map_err(|e| parse_error(2, 1, e.to_string()))?
        .clone();
    let columns = Columns::locate(&header, &SAMPLE_COLUMNS)?;
    let mut table = SampleTable::new();
    let mut warnings = Vec::new();
    for record in rows.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() + 1);
            parse_error(line, 1, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() + 1);
        let col = |i: usize| columns.index[i] + 1;
        let field = |i: usize| columns.get(&record, i, line);

        let config_id = field(0)?.to_string();
        let sample_id = field(1)?.to_string();
        let split = Split::parse(field(2)?).map_err(|e| relocate(e, line, col(2)))?;
        let raw_loss = parse_finite(field(3)?, "loss", line, col(3))?;
        let (loss, clamped) = clamp_loss(raw_loss)
            .map_err(|_| parse_error(line, col(3), format!("field `loss` must be non-negative, got {raw_loss}")))?;
        if clamped {
            warnings.push(format!(
                "line {line}: sample `{sample_id}` of `{config_id}` loss = {raw_loss} clamped to {loss}"
            ));
        }
        let correct = match field(4)? {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_error(
                    line,
                    col(4),
                    format!("field `correct` must be 0 or 1, got `{other}`"),
                ))
            }
        };
        table.entry(config_id).or_default().push(SampleRecord {
            sample_id,
            split,
            loss,
            correct,
        });
    }
    if table.is_empty() {
        return Err(FrocError::Config("per-sample file has no data rows".into()));
    }
    Ok((table, warnings))
}

/// Attaches per-sample records to their configurations. Configurations
/// without records stay in aggregate mode.
pub fn attach_samples(metrics: &mut [ConfigMetrics], mut samples: SampleTable) -> Result<()> {
    for m in metrics.iter_mut() {
        if let Some(records) = samples.remove(&m.config_id) {
            m.per_sample = Some(records);
            m.validate()?;
        }
    }
    if let Some(orphan) = samples.keys().next() {
        return Err(FrocError::Validation(format!(
            "per-sample records for unknown config `{orphan}`"
        )));
    }
    Ok(())
}

/// Writes `bytes` in full, reporting how much reached the sink on failure.
fn write_counted<W: Write>(sink: &mut W, bytes: &[u8]) -> Result<usize> {
    let mut written = 0;
    while written < bytes.len() {
        match sink.write(&bytes[written..]) {
            Ok(0) => {
                return Err(FrocError::Io {
                    message: "sink accepted no more bytes".into(),
                    written,
                })
            }
            Ok(n) => written += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(FrocError::io(e, written)),
        }
    }
    sink.flush().map_err(|e| FrocError::io(e, written))?;
    Ok(written)
}

pub fn render_metrics(configs: &[UnlearningConfig], metrics: &[ConfigMetrics]) -> Result<String> {
    let mut out = format!("schema={METRICS_SCHEMA}\n{}\n", METRICS_COLUMNS.join(","));
    for m in metrics {
        let config = configs
            .iter()
            .find(|c| c.id == m.config_id)
            .ok_or_else(|| FrocError::Validation(format!("no configuration for `{}`", m.config_id)))?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.config_id,
            config.method,
            format_real(config.learning_rate),
            config.ascent_steps,
            format_real(m.forget_loss),
            format_real(m.forget_acc),
            format_real(m.retain_loss),
            format_real(m.retain_acc),
        );
    }
    Ok(out)
}

pub fn render_samples(metrics: &[ConfigMetrics]) -> String {
    let mut out = format!("schema={SAMPLES_SCHEMA}\n{}\n", SAMPLE_COLUMNS.join(","));
    for m in metrics {
        for s in m.per_sample.iter().flatten() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.config_id,
                s.sample_id,
                s.split.as_str(),
                format_real(s.loss),
                u8::from(s.correct),
            );
        }
    }
    out
}

pub fn write_metrics<W: Write>(configs: &[UnlearningConfig], metrics: &[ConfigMetrics], sink: &mut W) -> Result<usize> {
    write_counted(sink, render_metrics(configs, metrics)?.as_bytes())
}

pub fn write_samples<W: Write>(metrics: &[ConfigMetrics], sink: &mut W) -> Result<usize> {
    write_counted(sink, render_samples(metrics).as_bytes())
}

fn render_extras(extras: &[(String, f64)]) -> String {
    if extras.is_empty() {
        return "-".to_string();
    }
    extras
        .iter()
        .map(|(name, value)| format!("{name}:{}", format_real(*value)))
        .collect::<Vec<_>>()
        .join(";")
}

/// Canonical text of a table, including the trailing checksum line.
pub fn serialize_table(table: &LookupTable) -> String {
    let weights = table.weights();
    let mut body = String::new();
    let _ = writeln!(body, "schema={TABLE_SCHEMA}");
    let _ = writeln!(body, "weights={},{}", format_real(weights.w_f), format_real(weights.w_u));
    let _ = writeln!(body, "tau_f={}", format_real(weights.tau_f));
    let _ = writeln!(body, "tau_f_policy={}", table.tau_f_policy());
    let _ = writeln!(body, "squash={}", weights.squash.as_str());
    match table.build_seed() {
        Some(seed) => {
            let _ = writeln!(body, "build_seed={seed}");
        }
        None => body.push_str("build_seed=none\n"),
    }
    let _ = writeln!(body, "entries={}", table.len());
    for e in table.entries() {
        let b = &e.breakdown;
        let _ = writeln!(
            body,
            "entry id={} method={} learning_rate={} ascent_steps={} extras={} mode={} n_ref={} r_hat={} s={} r={} delta_f={} delta_u={} r_tilde={} r_norm={}",
            e.config.id,
            e.config.method,
            format_real(e.config.learning_rate),
            e.config.ascent_steps,
            render_extras(&e.config.extras),
            e.mode.as_str(),
            e.stats.n_ref,
            format_real(e.stats.r_hat),
            format_real(b.s),
            format_real(b.r),
            format_real(b.delta_f),
            format_real(b.delta_u),
            format_real(b.r_tilde),
            format_real(b.r_norm),
        );
    }
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    let _ = writeln!(body, "checksum=sha256:{digest}");
    body
}

/// Writes the canonical table text; returns the byte count.
pub fn write_table<W: Write>(table: &LookupTable, sink: &mut W) -> Result<usize> {
    write_counted(sink, serialize_table(table).as_bytes())
}

struct LineCursor<'a> {
    lines: Vec<&'a str>,
    next: usize,
}

impl<'a> LineCursor<'a> {
    fn line_no(&self) -> u64 {
        self.next as u64
    }

    fn take(&mut self, what: &str) -> Result<&'a str> {
        let line = self.lines.get(self.next).copied().ok_or_else(|| {
            parse_error(self.next as u64 + 1, 1, format!("unexpected end of file, expected {what}"))
        })?;
        self.next += 1;
        Ok(line)
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.take(key)?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
            .ok_or_else(|| parse_error(self.line_no(), 1, format!("expected `{key}=...`")))
    }
}

fn canonical_real(token: &str, field: &str, line: u64, column: usize) -> Result<f64> {
    let value = parse_finite(token, field, line, column)?;
    if format_real(value) != token {
        return Err(parse_error(
            line,
            column,
            format!("field `{field}`: `{token}` is not in canonical form `{}`", format_real(value)),
        ));
    }
    Ok(value)
}

fn canonical_int<T: std::str::FromStr + ToString>(token: &str, field: &str, line: u64, column: usize) -> Result<T> {
    token
        .parse::<T>()
        .ok()
        .filter(|v| v.to_string() == token)
        .ok_or_else(|| parse_error(line, column, format!("field `{field}`: `{token}` is not a canonical integer")))
}

const ENTRY_FIELDS: [&str; 14] = [
    "id",
    "method",
    "learning_rate",
    "ascent_steps",
    "extras",
    "mode",
    "n_ref",
    "r_hat",
    "s",
    "r",
    "delta_f",
    "delta_u",
    "r_tilde",
    "r_norm",
];

fn parse_entry(line: &str, line_no: u64) -> Result<TableEntry> {
    let rest = line
        .strip_prefix("entry ")
        .ok_or_else(|| parse_error(line_no, 1, "expected an `entry` record"))?;
    let tokens: Vec<&str> = rest.split(' ').collect();
    if tokens.len() != ENTRY_FIELDS.len() {
        return Err(parse_error(
            line_no,
            1,
            format!("entry has {} fields, expected {}", tokens.len(), ENTRY_FIELDS.len()),
        ));
    }
    let mut values = Vec::with_capacity(tokens.len());
    let mut column = "entry ".len() + 1;
    let mut columns = Vec::with_capacity(tokens.len());
    for (token, key) in tokens.iter().zip(ENTRY_FIELDS) {
        let value = token
            .strip_prefix(key)
            .and_then(|t| t.strip_prefix('='))
            .ok_or_else(|| parse_error(line_no, column, format!("expected field `{key}=`")))?;
        values.push(value);
        columns.push(column + key.len() + 1);
        column += token.len() + 1;
    }
    let real = |i: usize| canonical_real(values[i], ENTRY_FIELDS[i], line_no, columns[i]);

    let extras = if values[4] == "-" {
        Vec::new()
    } else {
        values[4]
            .split(';')
            .map(|pair| {
                let (name, value) = pair
                    .split_once(':')
                    .ok_or_else(|| parse_error(line_no, columns[4], format!("malformed extra `{pair}`")))?;
                Ok((name.to_string(), canonical_real(value, "extras", line_no, columns[4])?))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut config = UnlearningConfig::new(
        values[0],
        Method::parse(values[1]).map_err(|e| relocate(e, line_no, columns[1]))?,
        real(2)?,
        canonical_int(values[3], "ascent_steps", line_no, columns[3])?,
    )
    .map_err(|e| relocate(e, line_no, columns[0]))?;
    config.extras = extras;
    config.validate().map_err(|e| relocate(e, line_no, columns[4]))?;
    let mode = EntryMode::parse(values[5]).map_err(|e| relocate(e, line_no, columns[5]))?;
    let stats = ReferenceStats::new(canonical_int(values[6], "n_ref", line_no, columns[6])?, real(7)?)
        .map_err(|e| relocate(e, line_no, columns[7]))?;
    let breakdown = RiskBreakdown {
        config_id: config.id.clone(),
        s: real(8)?,
        r: real(9)?,
        delta_f: real(10)?,
        delta_u: real(11)?,
        r_tilde: real(12)?,
        r_norm: real(13)?,
    };
    Ok(TableEntry {
        config,
        stats,
        breakdown,
        mode,
    })
}

/// Reads and validates a table file written by [`write_table`].
pub fn read_table<R: Read>(mut source: R) -> Result<LookupTable> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| FrocError::io(e, 0))?;
    if !text.ends_with('\n') {
        return Err(parse_error(text.lines().count() as u64, 1, "file must end with a newline"));
    }
    if text.contains('\r') {
        return Err(parse_error(1, 1, "carriage returns are not allowed"));
    }
    let mut cursor = LineCursor {
        lines: text[..text.len() - 1].split('\n').collect(),
        next: 0,
    };

    let schema = cursor.keyed("schema")?;
    if schema != TABLE_SCHEMA {
        return Err(FrocError::Version {
            found: schema.to_string(),
            expected: TABLE_SCHEMA.to_string(),
        });
    }
    let weights_line = cursor.keyed("weights")?;
    let line = cursor.line_no();
    let (w_f, w_u) = weights_line
        .split_once(',')
        .ok_or_else(|| parse_error(line, 9, "weights must be `w_f,w_u`"))?;
    let w_f = canonical_real(w_f, "weights", line, 9)?;
    let w_u = canonical_real(w_u, "weights", line, 9)?;
    let tau_f = {
        let token = cursor.keyed("tau_f")?;
        canonical_real(token, "tau_f", cursor.line_no(), 7)?
    };
    let tau_policy = cursor.keyed("tau_f_policy")?;
    let squash = Squash::parse(cursor.keyed("squash")?).map_err(|e| relocate(e, cursor.line_no(), 8))?;
    let seed_token = cursor.keyed("build_seed")?;
    let build_seed = if seed_token == "none" {
        None
    } else {
        Some(canonical_int::<u64>(seed_token, "build_seed", cursor.line_no(), 12)?)
    };
    let count_token = cursor.keyed("entries")?;
    let count: usize = canonical_int(count_token, "entries", cursor.line_no(), 9)?;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = cursor.take("entry")?;
        entries.push(parse_entry(line, cursor.line_no())?);
    }
    for pair in entries.windows(2) {
        if pair[0].config.id >= pair[1].config.id {
            return Err(parse_error(
                cursor.line_no(),
                1,
                "entries must be sorted by id without duplicates",
            ));
        }
    }

    let body_len: usize = cursor.lines[..cursor.next].iter().map(|l| l.len() + 1).sum();
    let checksum = cursor.keyed("checksum")?;
    let expected = format!("sha256:{}", hex::encode(Sha256::digest(&text.as_bytes()[..body_len])));
    if checksum != expected {
        return Err(parse_error(cursor.line_no(), 10, "checksum mismatch"));
    }
    if cursor.next != cursor.lines.len() {
        return Err(parse_error(cursor.line_no() + 1, 1, "trailing content after checksum"));
    }

    let weights = RiskWeights::new(w_f, w_u, tau_f, squash)?;
    LookupTable::from_parts(
        crate::controller::TABLE_FORMAT_VERSION,
        weights,
        tau_policy,
        entries,
        build_seed,
    )
}

/// Which plot-ready series to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    /// One row per configuration: risk terms and bound.
    RiskVsConfig,
    /// Bound for every configuration at each requested reference size.
    NrefSweep,
    /// Best bound per method, labelled by model.
    MethodHeatmap,
    /// `(aggressiveness, n_ref) -> alpha_unlearn` grid.
    Surface,
}

impl ReportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::RiskVsConfig => "risk-vs-config",
            ReportKind::NrefSweep => "nref-sweep",
            ReportKind::MethodHeatmap => "method-heatmap",
            ReportKind::Surface => "surface",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "risk-vs-config" => Ok(ReportKind::RiskVsConfig),
            "nref-sweep" => Ok(ReportKind::NrefSweep),
            "method-heatmap" => Ok(ReportKind::MethodHeatmap),
            "surface" => Ok(ReportKind::Surface),
            other => Err(FrocError::Usage(format!(
                "unknown report kind `{other}` (expected risk-vs-config, nref-sweep, method-heatmap or surface)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportParams {
    pub delta: f64,
    /// Reference sizes for the sweep and surface series.
    pub n_values: Vec<u64>,
    /// Row label for heatmap output.
    pub model_label: String,
}

impl Default for ReportParams {
    fn default() -> Self {
        Self {
            delta: 0.1,
            n_values: vec![50, 100, 200, 400, 800],
            model_label: "model".to_string(),
        }
    }
}

fn report_header(out: &mut String, kind: ReportKind, params: &ReportParams, columns: &[&str]) {
    let _ = writeln!(
        out,
        "# schema={REPORT_SCHEMA} kind={} delta={}",
        kind.as_str(),
        format_real(params.delta)
    );
    let _ = writeln!(out, "#{}", columns.join(","));
}

fn n_values(params: &ReportParams) -> Result<&[u64]> {
    if params.n_values.is_empty() || params.n_values.contains(&0) {
        return Err(FrocError::Usage("n values must be a non-empty list of positive integers".into()));
    }
    Ok(&params.n_values)
}

/// Emits one series for a single table. Values are recomputed from the
/// stored sufficient statistics.
pub fn emit_report_series(table: &LookupTable, kind: ReportKind, params: &ReportParams) -> Result<String> {
    if kind == ReportKind::MethodHeatmap {
        return emit_method_heatmap(&[(params.model_label.as_str(), table)], params);
    }
    if table.is_empty() {
        return Err(FrocError::Config("cannot report on an empty table".into()));
    }
    let budget = RiskBudget::new(params.delta)?;
    let mut out = String::new();
    match kind {
        ReportKind::RiskVsConfig => {
            report_header(
                &mut out,
                kind,
                params,
                &[
                    "config_id", "method", "learning_rate", "ascent_steps", "mode", "s", "r", "r_tilde", "r_norm",
                    "n_ref", "r_hat", "alpha_hoeffding", "alpha_bentkus", "alpha_unlearn",
                ],
            );
            for e in table.entries() {
                let bound = conformal_unlearning_risk(budget, e.stats);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    e.config.id,
                    e.config.method,
                    format_real(e.config.learning_rate),
                    e.config.ascent_steps,
                    e.mode.as_str(),
                    format_real(e.breakdown.s),
                    format_real(e.breakdown.r),
                    format_real(e.breakdown.r_tilde),
                    format_real(e.breakdown.r_norm),
                    e.stats.n_ref,
                    format_real(e.stats.r_hat),
                    format_real(bound.alpha_hoeffding),
                    format_real(bound.alpha_bentkus),
                    format_real(bound.alpha_unlearn),
                );
            }
        }
        ReportKind::NrefSweep => {
            let ns = n_values(params)?;
            report_header(
                &mut out,
                kind,
                params,
                &["config_id", "n_ref", "r_hat", "alpha_hoeffding", "alpha_bentkus", "alpha_unlearn"],
            );
            for e in table.entries() {
                for &n in ns {
                    let bound = conformal_unlearning_risk(budget, ReferenceStats::new(n, e.stats.r_hat)?);
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        e.config.id,
                        n,
                        format_real(e.stats.r_hat),
                        format_real(bound.alpha_hoeffding),
                        format_real(bound.alpha_bentkus),
                        format_real(bound.alpha_unlearn),
                    );
                }
            }
        }
        ReportKind::Surface => {
            let ns = n_values(params)?;
            report_header(
                &mut out,
                kind,
                params,
                &["config_id", "method", "aggressiveness", "n_ref", "r_hat", "alpha_unlearn"],
            );
            let mut ordered: Vec<&TableEntry> = table.entries().iter().collect();
            ordered.sort_by(|a, b| {
                a.config
                    .aggressiveness()
                    .total_cmp(&b.config.aggressiveness())
                    .then_with(|| a.config.id.cmp(&b.config.id))
            });
            for e in ordered {
                for &n in ns {
                    let bound = conformal_unlearning_risk(budget, ReferenceStats::new(n, e.stats.r_hat)?);
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        e.config.id,
                        e.config.method,
                        format_real(e.config.aggressiveness()),
                        n,
                        format_real(e.stats.r_hat),
                        format_real(bound.alpha_unlearn),
                    );
                }
            }
        }
        ReportKind::MethodHeatmap => unreachable!("handled above"),
    }
    Ok(out)
}

/// Heatmap cells `(model, method) -> smallest alpha_unlearn` with the
/// configuration attaining it.
pub fn emit_method_heatmap(models: &[(&str, &LookupTable)], params: &ReportParams) -> Result<String> {
    if models.is_empty() {
        return Err(FrocError::Config("heatmap needs at least one table".into()));
    }
    let budget = RiskBudget::new(params.delta)?;
    let mut out = String::new();
    report_header(
        &mut out,
        ReportKind::MethodHeatmap,
        params,
        &["model", "method", "best_config", "n_ref", "r_hat", "alpha_unlearn"],
    );
    for (label, table) in models {
        crate::risk_model::validate_identifier("model label", label)?;
        if table.is_empty() {
            return Err(FrocError::Config(format!("table for `{label}` is empty")));
        }
        let mut best: BTreeMap<&Method, (f64, &TableEntry)> = BTreeMap::new();
        for e in table.entries() {
            let alpha = conformal_unlearning_risk(budget, e.stats).alpha_unlearn;
            let slot = best.entry(&e.config.method).or_insert((alpha, e));
            if alpha < slot.0 {
                *slot = (alpha, e);
            }
        }
        for (method, (alpha, e)) in best {
            let _ = writeln!(
                out,
                "{label},{method},{},{},{},{}",
                e.config.id,
                e.stats.n_ref,
                format_real(e.stats.r_hat),
                format_real(alpha),
            );
        }
    }
    Ok(out)
}
