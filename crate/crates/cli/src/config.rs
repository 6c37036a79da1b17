//! Plain-text run configuration.
//!
//! Format: `[section]` headers with `key = value` lines; values are
//! numbers, quoted strings, or parenthesized numeric tuples `(a, b, c)`;
//! `#` starts a comment. Parsing is strict: unknown sections or keys are
//! errors, and every constraint violation reports the offending line.

use std::collections::BTreeMap;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Text(String),
    Tuple(Vec<f64>),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Number(_) => "number",
            Value::Text(_) => "string",
            Value::Tuple(_) => "tuple",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub line: usize,
    pub value: Value,
}

/// Parsed but untyped configuration text.
#[derive(Debug, Default, Clone)]
pub struct RawConfig {
    pub sections: BTreeMap<String, BTreeMap<String, Entry>>,
    pub text: String,
}

// every key the tool understands, per section
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "state",
        &[
            "kind", "dim", "sigma", "mass", "center", "momentum", "count", "path", "coeff_1",
            "coeff_2", "coeff_3", "coeff_4", "center_1", "center_2", "center_3", "center_4",
            "momentum_1", "momentum_2", "momentum_3", "momentum_4", "sigma_1", "sigma_2",
            "sigma_3", "sigma_4",
        ],
    ),
    ("grid", &["n", "length"]),
    (
        "evolution",
        &[
            "method",
            "t_end",
            "dt",
            "dt_frame",
            "frame_every",
            "potential",
            "v0",
            "a",
        ],
    ),
    ("region", &["kind", "center", "radius", "a", "b"]),
    ("surface", &["n_theta", "n_phi"]),
    (
        "ensemble",
        &[
            "count",
            "seed",
            "horizon",
            "rtol",
            "atol",
            "eps_node",
            "outside_tol",
            "snapshot_times",
        ],
    ),
    (
        "compare",
        &["time_bins", "t_max", "patch_bands", "band_axis"],
    ),
    ("flux", &["horizon", "time_steps", "cpc_tol"]),
    (
        "fast",
        &[
            "radii",
            "horizon",
            "time_steps",
            "sigma",
            "cap_axis",
            "cap_angle_deg",
            "momentum_n",
            "momentum_length",
            "wave_t",
        ],
    ),
    ("output", &["decimate", "trajectory_count"]),
];

fn schema_keys(section: &str) -> Option<&'static [&'static str]> {
    SCHEMA
        .iter()
        .find(|(name, _)| *name == section)
        .map(|(_, keys)| *keys)
}

fn err(line: usize, message: impl Into<String>) -> CliError {
    CliError::Config {
        line,
        message: message.into(),
    }
}

/// Parse and validate the raw config text.
pub fn parse_raw(text: &str) -> Result<RawConfig, CliError> {
    let mut cfg = RawConfig {
        sections: BTreeMap::new(),
        text: text.to_string(),
    };
    let mut current: Option<String> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw_line);
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line_no, "unterminated section header"))?
                .trim()
                .to_string();
            if schema_keys(&name).is_none() {
                return Err(err(line_no, format!("unknown section [{name}]")));
            }
            cfg.sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (key, value_text) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, "expected `key = value`"))?;
        let key = key.trim().to_string();
        let section = current
            .clone()
            .ok_or_else(|| err(line_no, "key outside any [section]"))?;
        let allowed = schema_keys(&section).unwrap();
        if !allowed.contains(&key.as_str()) {
            return Err(err(
                line_no,
                format!("unknown key `{key}` in section [{section}]"),
            ));
        }
        let value = parse_value(value_text.trim(), line_no)?;
        let entries = cfg.sections.get_mut(&section).unwrap();
        if entries
            .insert(key.clone(), Entry { line: line_no, value })
            .is_some()
        {
            return Err(err(line_no, format!("duplicate key `{key}`")));
        }
    }
    Ok(cfg)
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_value(text: &str, line: usize) -> Result<Value, CliError> {
    if text.is_empty() {
        return Err(err(line, "empty value"));
    }
    if let Some(stripped) = text.strip_prefix('"') {
        let inner = stripped
            .strip_suffix('"')
            .ok_or_else(|| err(line, "unterminated string"))?;
        return Ok(Value::Text(inner.to_string()));
    }
    if let Some(stripped) = text.strip_prefix('(') {
        let inner = stripped
            .strip_suffix(')')
            .ok_or_else(|| err(line, "unterminated tuple"))?;
        let mut nums = Vec::new();
        for part in inner.split(',') {
            let part = part.trim();
            if part.is_empty() {
                return Err(err(line, "empty tuple element"));
            }
            nums.push(
                part.parse::<f64>()
                    .map_err(|_| err(line, format!("`{part}` is not a number")))?,
            );
        }
        if nums.is_empty() {
            return Err(err(line, "empty tuple"));
        }
        return Ok(Value::Tuple(nums));
    }
    text.parse::<f64>()
        .map(Value::Number)
        .map_err(|_| err(line, format!("`{text}` is not a number, string or tuple")))
}

/// Typed accessors; every getter names the constraint it checks.
pub struct SectionView<'a> {
    pub name: &'a str,
    entries: Option<&'a BTreeMap<String, Entry>>,
}

impl<'a> SectionView<'a> {
    pub fn exists(&self) -> bool {
        self.entries.is_some()
    }

    pub fn entry(&self, key: &str) -> Option<&'a Entry> {
        self.entries.and_then(|e| e.get(key))
    }

    pub fn require(&self, key: &str) -> Result<&'a Entry, CliError> {
        self.entry(key).ok_or_else(|| {
            err(
                0,
                format!("missing required key `{key}` in section [{}]", self.name),
            )
        })
    }

    pub fn number(&self, key: &str) -> Result<f64, CliError> {
        let e = self.require(key)?;
        match &e.value {
            Value::Number(x) => Ok(*x),
            other => Err(err(e.line, format!("`{key}` must be a number, got {}", other.kind()))),
        }
    }

    pub fn number_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.entry(key) {
            None => Ok(default),
            Some(_) => self.number(key),
        }
    }

    pub fn positive(&self, key: &str) -> Result<f64, CliError> {
        let v = self.number(key)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(err(
                self.entry(key).map(|e| e.line).unwrap_or(0),
                format!("`{key}` must satisfy {key} > 0, got {v}"),
            ))
        }
    }

    pub fn positive_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.entry(key) {
            None => Ok(default),
            Some(_) => self.positive(key),
        }
    }

    pub fn integer(&self, key: &str) -> Result<usize, CliError> {
        let e = self.require(key)?;
        match &e.value {
            Value::Number(x) if x.fract() == 0.0 && *x >= 0.0 => Ok(*x as usize),
            _ => Err(err(e.line, format!("`{key}` must be a nonnegative integer"))),
        }
    }

    pub fn integer_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.entry(key) {
            None => Ok(default),
            Some(_) => self.integer(key),
        }
    }

    pub fn text(&self, key: &str) -> Result<&'a str, CliError> {
        let e = self.require(key)?;
        match &e.value {
            Value::Text(s) => Ok(s),
            other => Err(err(e.line, format!("`{key}` must be a string, got {}", other.kind()))),
        }
    }

    pub fn text_or(&self, key: &str, default: &'a str) -> Result<&'a str, CliError> {
        match self.entry(key) {
            None => Ok(default),
            Some(_) => self.text(key),
        }
    }

    /// Point-like value: scalar (1-d) or 3-tuple.
    pub fn point(&self, key: &str, dim: usize) -> Result<[f64; 3], CliError> {
        let e = self.require(key)?;
        match (&e.value, dim) {
            (Value::Number(x), 1) => Ok([*x, 0.0, 0.0]),
            (Value::Tuple(v), d) if v.len() == d => {
                let mut out = [0.0; 3];
                out[..d].copy_from_slice(&v[..d]);
                Ok(out)
            }
            _ => Err(err(
                e.line,
                format!("`{key}` must have {dim} component(s)"),
            )),
        }
    }

    pub fn point_or(&self, key: &str, dim: usize, default: [f64; 3]) -> Result<[f64; 3], CliError> {
        match self.entry(key) {
            None => Ok(default),
            Some(_) => self.point(key, dim),
        }
    }

    pub fn tuple(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let e = self.require(key)?;
        match &e.value {
            Value::Tuple(v) => Ok(v.clone()),
            Value::Number(x) => Ok(vec![*x]),
            other => Err(err(e.line, format!("`{key}` must be a tuple, got {}", other.kind()))),
        }
    }
}

impl RawConfig {
    pub fn section<'a>(&'a self, name: &'a str) -> SectionView<'a> {
        SectionView {
            name,
            entries: self.sections.get(name),
        }
    }

    pub fn require_section<'a>(&'a self, name: &'a str) -> Result<SectionView<'a>, CliError> {
        if self.sections.contains_key(name) {
            Ok(self.section(name))
        } else {
            Err(err(0, format!("missing required section [{name}]")))
        }
    }
}
