//! Plain-text configuration: `[section]` headers followed by `key = value` lines.
//! `#` starts a comment; blank lines are ignored; a section name may repeat.
//!
//! Model specs use one `[model]` section and one `[layer]` section per layer, in order:
//!
//! ```text
//! [model]
//! name = my-cnn
//! family = cnn
//! classes = 4
//!
//! [layer]
//! kind = conv
//! filters = 32
//! kernel = 10
//!
//! [layer]
//! kind = dropout
//! keep_prob = 0.5
//! ```
//!
//! Simulator profiles have one optional section per cell type (`[PY]`, `[PV]`, `[SOM]`,
//! `[VIP]`); keys left out keep their default values.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelFamily, ModelSpec};
use crate::sim::{CellType, ClassParams, Profile};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

pub fn parse(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config { line, msg: "unterminated section header".into() })?
                .trim();
            if name.is_empty() {
                return Err(Error::Config { line, msg: "empty section name".into() });
            }
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, found `{content}`") })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config { line, msg: "empty key".into() });
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| Error::Config { line, msg: "key outside of any section".into() })?;
        if section.entries.iter().any(|e| e.key == key) {
            return Err(Error::Config { line, msg: format!("duplicate key `{key}`") });
        }
        section.entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(sections)
}

impl Section {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| Error::Config {
                line: e.line,
                msg: format!("cannot parse `{}` for `{key}`", e.value),
            }),
        }
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.value(key)?.ok_or_else(|| Error::Config {
            line: self.line,
            msg: format!("[{}] is missing `{key}`", self.name),
        })
    }

    fn only(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(Error::Config {
                line: e.line,
                msg: format!("unknown key `{}` in [{}]", e.key, self.name),
            }),
            None => Ok(()),
        }
    }
}

pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let sections = parse(text)?;
    let mut model = None;
    let mut layers = Vec::new();
    for s in &sections {
        match s.name.as_str() {
            "model" => {
                if model.is_some() {
                    return Err(Error::Config { line: s.line, msg: "more than one [model] section".into() });
                }
                model = Some(s);
            }
            "layer" => layers.push(layer(s)?),
            other => {
                return Err(Error::Config {
                    line: s.line,
                    msg: format!("unknown section [{other}]"),
                })
            }
        }
    }
    let m = model.ok_or(Error::Config { line: 1, msg: "missing [model] section".into() })?;
    m.only(&["name", "family", "timesteps", "classes", "seed", "rounds"])?;
    let family: ModelFamily = m.require::<String>("family")?.parse().map_err(|e: Error| Error::Config {
        line: m.get("family").map_or(m.line, |e| e.line),
        msg: e.to_string(),
    })?;
    Ok(ModelSpec {
        name: m.value("name")?.unwrap_or_else(|| "custom".to_string()),
        family,
        layers,
        timesteps: m.value("timesteps")?.unwrap_or(1),
        classes: m.value("classes")?.unwrap_or(4),
        seed: m.value("seed")?.unwrap_or(0),
        rounds: m.value("rounds")?.unwrap_or(0),
    })
}

fn layer(s: &Section) -> Result<LayerSpec> {
    let kind: String = s.require("kind")?;
    let spec = match kind.as_str() {
        "conv" => {
            s.only(&["kind", "filters", "kernel", "stride"])?;
            LayerSpec::Conv {
                filters: s.require("filters")?,
                kernel: s.require("kernel")?,
                stride: s.value("stride")?.unwrap_or(1),
            }
        }
        "maxpool" => {
            s.only(&["kind", "size", "stride"])?;
            let size = s.require("size")?;
            LayerSpec::MaxPool {
                size,
                stride: s.value("stride")?.unwrap_or(size),
            }
        }
        "dropout" => {
            s.only(&["kind", "keep_prob"])?;
            LayerSpec::Dropout {
                keep_prob: s.require("keep_prob")?,
            }
        }
        "rnn" | "lstm" => {
            s.only(&["kind", "hidden"])?;
            let hidden = s.require("hidden")?;
            if kind == "rnn" {
                LayerSpec::Rnn { hidden }
            } else {
                LayerSpec::Lstm { hidden }
            }
        }
        other => {
            return Err(Error::Config {
                line: s.get("kind").map_or(s.line, |e| e.line),
                msg: format!("unknown layer kind `{other}`"),
            })
        }
    };
    Ok(spec)
}

/// Text form accepted by [`parse_model_spec`]. Floats print in shortest round-trip form.
pub fn model_spec_to_string(spec: &ModelSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[model]");
    let _ = writeln!(out, "name = {}", spec.name);
    let _ = writeln!(out, "family = {}", spec.family);
    let _ = writeln!(out, "timesteps = {}", spec.timesteps);
    let _ = writeln!(out, "classes = {}", spec.classes);
    let _ = writeln!(out, "seed = {}", spec.seed);
    let _ = writeln!(out, "rounds = {}", spec.rounds);
    for l in &spec.layers {
        let _ = writeln!(out, "\n[layer]\nkind = {}", l.kind());
        let _ = match *l {
            LayerSpec::Conv { filters, kernel, stride } => {
                writeln!(out, "filters = {filters}\nkernel = {kernel}\nstride = {stride}")
            }
            LayerSpec::MaxPool { size, stride } => writeln!(out, "size = {size}\nstride = {stride}"),
            LayerSpec::Dropout { keep_prob } => writeln!(out, "keep_prob = {keep_prob:?}"),
            LayerSpec::Rnn { hidden } | LayerSpec::Lstm { hidden } => writeln!(out, "hidden = {hidden}"),
        };
    }
    out
}

const PROFILE_KEYS: [&str; 8] = [
    "spike_rate",
    "tau_rise",
    "tau_decay",
    "amplitude_mean",
    "amplitude_cv",
    "noise_std",
    "drift_amp",
    "drift_period",
];

fn field<'a>(p: &'a mut ClassParams, key: &str) -> &'a mut f64 {
    match key {
        "spike_rate" => &mut p.spike_rate,
        "tau_rise" => &mut p.tau_rise,
        "tau_decay" => &mut p.tau_decay,
        "amplitude_mean" => &mut p.amplitude_mean,
        "amplitude_cv" => &mut p.amplitude_cv,
        "noise_std" => &mut p.noise_std,
        "drift_amp" => &mut p.drift_amp,
        "drift_period" => &mut p.drift_period,
        _ => unreachable!("checked against PROFILE_KEYS"),
    }
}

/// Overrides on top of the default profile.
pub fn parse_profile(text: &str) -> Result<Profile> {
    let mut profile = Profile::default();
    let mut seen = Vec::new();
    for s in parse(text)? {
        let cell: CellType = s.name.parse().map_err(|_| Error::Config {
            line: s.line,
            msg: format!("unknown cell type [{}]", s.name),
        })?;
        if seen.contains(&cell) {
            return Err(Error::Config { line: s.line, msg: format!("duplicate section [{}]", s.name) });
        }
        seen.push(cell);
        s.only(&PROFILE_KEYS)?;
        for e in &s.entries {
            *field(profile.get_mut(cell), &e.key) = s.require(&e.key)?;
        }
        profile.get(cell).validate().map_err(|err| Error::Config {
            line: s.line,
            msg: err.to_string(),
        })?;
    }
    Ok(profile)
}

pub fn profile_to_string(profile: &Profile) -> String {
    let mut out = String::new();
    for cell in CellType::ALL {
        let mut p = *profile.get(cell);
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "[{cell}]");
        for key in PROFILE_KEYS {
            let _ = writeln!(out, "{key} = {:?}", *field(&mut p, key));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    #[test]
    fn parser_reports_line_numbers() {
        let err = parse("[a]\nx = 1\n\nbroken line\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 4, .. }));
        assert!(matches!(parse("x = 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse("[a]\nx=1\nx=2"), Err(Error::Config { line: 3, .. })));
        let ok = parse("# header\n[a] # trailing\n k = v w \n[a]\n").unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok[0].entries[0].value, "v w");
    }

    #[test]
    fn every_preset_round_trips_through_text() {
        for spec in presets() {
            let text = model_spec_to_string(&spec);
            assert_eq!(parse_model_spec(&text).unwrap(), spec, "{text}");
        }
    }

    #[test]
    fn spec_defaults_and_errors() {
        let s = parse_model_spec("[model]\nfamily = rnn\ntimesteps = 4\n[layer]\nkind = rnn\nhidden = 8\n").unwrap();
        assert_eq!((s.classes, s.seed, s.layers.len()), (4, 0, 1));
        assert!(parse_model_spec("[model]\nfamily = gru\n").is_err());
        assert!(parse_model_spec("[model]\nfamily = cnn\n[layer]\nkind = conv\nfilters = 2\n").is_err());
        assert!(parse_model_spec("[model]\nfamily = cnn\nwidth = 3\n").is_err());
        let pool = parse_model_spec("[model]\nfamily = cnn\n[layer]\nkind = maxpool\nsize = 3\n").unwrap();
        assert_eq!(pool.layers, vec![LayerSpec::MaxPool { size: 3, stride: 3 }]);
    }

    #[test]
    fn profiles_override_defaults() {
        let p = parse_profile("[VIP]\nspike_rate = 0.2\n").unwrap();
        let mut expected = Profile::default();
        expected.get_mut(CellType::Vip).spike_rate = 0.2;
        assert_eq!(p, expected);
        assert_eq!(parse_profile(&profile_to_string(&p)).unwrap(), p);
        assert_eq!(parse_profile("").unwrap(), Profile::default());
        assert!(parse_profile("[XY]\n").is_err());
        assert!(parse_profile("[PY]\ntau_rise = 100\n").is_err());
        assert!(parse_profile("[PY]\ncolour = red\n").is_err());
    }
}
