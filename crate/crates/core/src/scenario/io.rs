//! Plain-text feature files and scenario manifests.
//!
//! Feature file: first line `<N> <d>`, then N lines of `d` reals, each
//! optionally followed by one integer label. Manifest: `key = value` lines
//! naming `source`, `target`, `split` and `K`; relative paths resolve against
//! the manifest's directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DomainDataset, Scenario, SplitSpec};
use crate::error::{Error, Result};
use crate::math::Tensor2;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_feature_text(path: &Path, text: &str, has_labels: bool) -> Result<DomainDataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header '<N> <d>'"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 2 {
        return Err(parse_err(
            path,
            hline,
            format!("header must be '<N> <d>', got '{header}'"),
        ));
    }
    let n: usize = fields[0]
        .parse()
        .map_err(|_| parse_err(path, hline, format!("invalid sample count '{}'", fields[0])))?;
    let d: usize = fields[1]
        .parse()
        .map_err(|_| parse_err(path, hline, format!("invalid dimension '{}'", fields[1])))?;
    if d == 0 {
        return Err(parse_err(path, hline, "dimension must be at least 1"));
    }

    let expected = d + usize::from(has_labels);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(if has_labels { n } else { 0 });
    let mut rows = 0;
    let mut last_line = hline;
    for (lineno, line) in lines {
        last_line = lineno;
        if rows == n {
            return Err(parse_err(
                path,
                lineno,
                format!("more than the {n} rows announced in the header"),
            ));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != expected {
            return Err(parse_err(
                path,
                lineno,
                format!(
                    "expected {d} values{}, found {} fields",
                    if has_labels { " and a label" } else { "" },
                    fields.len()
                ),
            ));
        }
        for f in &fields[..d] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric field '{f}'")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, format!("non-finite value '{f}'")));
            }
            data.push(v);
        }
        if has_labels {
            let f = fields[d];
            let y: usize = f
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("invalid label '{f}'")))?;
            labels.push(y);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(path, last_line, "no samples"));
    }
    if rows != n {
        return Err(parse_err(
            path,
            last_line,
            format!("header announces {n} rows, found {rows}"),
        ));
    }
    let features = Tensor2::from_vec(n, d, data)?;
    let (labels, space) = if has_labels {
        let space: BTreeSet<usize> = labels.iter().copied().collect();
        (Some(labels), space)
    } else {
        (None, BTreeSet::new())
    };
    DomainDataset::new(features, labels, space)
}

/// Reads a feature file. Labels are parsed only when `has_labels` is set; the
/// label space becomes the set of labels present in the file.
pub fn load_features(path: impl AsRef<Path>, has_labels: bool) -> Result<DomainDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_text(path, &text, has_labels)
}

fn format_features(ds: &DomainDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", ds.len(), ds.dim());
    for (i, row) in ds.features.iter_rows().enumerate() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            // shortest representation that parses back to the same f64
            let _ = write!(out, "{v:?}");
        }
        if let Some(labels) = &ds.labels {
            let _ = write!(out, " {}", labels[i]);
        }
        out.push('\n');
    }
    out
}

pub fn save_features(path: impl AsRef<Path>, ds: &DomainDataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_features(ds)).map_err(|e| Error::io(path, e))
}

/// Paths written by [`save_scenario`].
#[derive(Clone, Debug)]
pub struct ScenarioFiles {
    pub manifest: PathBuf,
    pub source: PathBuf,
    pub target: PathBuf,
}

/// Writes `source.txt`, `target.txt` (target labels included for evaluation)
/// and `scenario.manifest` into `dir`.
pub fn save_scenario(dir: impl AsRef<Path>, scenario: &Scenario) -> Result<ScenarioFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ScenarioFiles {
        manifest: dir.join("scenario.manifest"),
        source: dir.join("source.txt"),
        target: dir.join("target.txt"),
    };
    save_features(&files.source, &scenario.source)?;
    save_features(&files.target, &scenario.target)?;
    let manifest = format!(
        "source = source.txt\ntarget = target.txt\nsplit = {}\nK = {}\n",
        scenario.split, scenario.k
    );
    fs::write(&files.manifest, manifest).map_err(|e| Error::io(&files.manifest, e))?;
    Ok(files)
}

/// Loads a scenario from its manifest. The target file may omit labels, in
/// which case the scenario cannot be evaluated but can still be trained on.
pub fn load_scenario(manifest: impl AsRef<Path>) -> Result<Scenario> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));

    let (mut source, mut target, mut split, mut k) = (None, None, None, None);
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        last = lineno;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            parse_err(
                manifest,
                lineno,
                format!("expected 'key = value', got '{line}'"),
            )
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "source" => source = Some((lineno, base.join(value))),
            "target" => target = Some((lineno, base.join(value))),
            "split" => {
                split = Some(
                    value
                        .parse::<SplitSpec>()
                        .map_err(|e| parse_err(manifest, lineno, e.to_string()))?,
                )
            }
            "K" => {
                k = Some((
                    lineno,
                    value
                        .parse::<usize>()
                        .map_err(|_| parse_err(manifest, lineno, format!("invalid K '{value}'")))?,
                ))
            }
            other => {
                return Err(parse_err(
                    manifest,
                    lineno,
                    format!("unknown key '{other}'"),
                ))
            }
        }
    }
    let missing = |what: &str| parse_err(manifest, last, format!("missing '{what}' entry"));
    let (_, source_path) = source.ok_or_else(|| missing("source"))?;
    let (_, target_path) = target.ok_or_else(|| missing("target"))?;
    let split = split.ok_or_else(|| missing("split"))?;
    if let Some((line, k)) = k {
        if k != split.num_source_classes() {
            return Err(parse_err(
                manifest,
                line,
                format!("K = {k} disagrees with split {split}"),
            ));
        }
    }
    load_domains(&source_path, &target_path, split)
}

/// Builds a scenario from a labeled source file and a target file whose
/// labels are optional.
pub fn load_domains(source_path: &Path, target_path: &Path, split: SplitSpec) -> Result<Scenario> {
    let mut src = load_features(source_path, true)?;
    src.label_space = split.source_label_space();
    if let Some(bad) = src
        .labels
        .iter()
        .flatten()
        .find(|y| !src.label_space.contains(y))
    {
        return Err(Error::InvalidArgument(format!(
            "{}: source label {bad} outside 0..{}",
            source_path.display(),
            split.num_source_classes()
        )));
    }
    let tgt = match load_features(target_path, true) {
        Ok(mut t) => {
            t.label_space = split.target_label_space();
            t
        }
        Err(Error::Parse { .. }) => {
            let mut t = load_features(target_path, false)?;
            t.label_space = split.target_label_space();
            t
        }
        Err(e) => return Err(e),
    };
    Scenario::new(src, tgt, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, SyntheticSpec};

    fn parse(text: &str, labels: bool) -> Result<DomainDataset> {
        parse_feature_text(Path::new("mem.txt"), text, labels)
    }

    #[test]
    fn minimal_file() {
        let ds = parse("3 2\n1.0 2.0 0\n3 4 1\n-1e-3 5.5 0\n", true).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels.as_deref(), Some(&[0, 1, 0][..]));
        assert_eq!(ds.features.get(2, 0), -1e-3);
    }

    #[test]
    fn unlabeled_file() {
        let ds = parse("2 3\n1 2 3\n4 5 6\n", false).unwrap();
        assert!(ds.labels.is_none());
    }

    #[test]
    fn error_messages_carry_line_numbers() {
        let msg = |t: &str, l| parse(t, l).unwrap_err().to_string();
        assert!(msg("", true).contains("missing header"));
        assert!(msg("3 2\n", true).contains("no samples"));
        assert!(msg("0 2\n", true).contains("no samples"));
        assert!(msg("2 2\n1 2 0\n1 x 0\n", true).contains("mem.txt:3: non-numeric field 'x'"));
        assert!(msg("2 2\n1 2 3 0\n", true).contains(":2: expected 2 values and a label"));
        assert!(msg("2 2\n1 2 0\n", true).contains("announces 2 rows, found 1"));
        assert!(msg("1 2\n1 2 0\n3 4 0\n", true).contains(":3: more than"));
        assert!(msg("x 2\n", true).contains(":1: invalid sample count"));
        assert!(msg("1 2\n1 2 -1\n", true).contains("invalid label"));
    }

    #[test]
    fn scenario_round_trip() {
        let split = SplitSpec::new(3, 1, 2).unwrap();
        let sc = generate_scenario(
            &SyntheticSpec {
                split,
                dim: 5,
                n_per_class: 6,
                shift_magnitude: 1.0,
                spread: 0.7,
            },
            4,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save_scenario(dir.path(), &sc).unwrap();
        let back = load_scenario(&files.manifest).unwrap();
        assert_eq!(back.split, sc.split);
        assert_eq!(back.source.labels, sc.source.labels);
        assert_eq!(back.target.labels, sc.target.labels);
        assert!(back.source.features.max_abs_diff(&sc.source.features) <= 1e-9);
        assert!(back.target.features.max_abs_diff(&sc.target.features) <= 1e-9);
        // exact decimal round trip
        assert_eq!(back, sc);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.manifest");
        fs::write(&m, "source = a.txt\ntarget = b.txt\nsplit = 2/0/1\nK = 3\n").unwrap();
        assert!(load_scenario(&m)
            .unwrap_err()
            .to_string()
            .contains("K = 3 disagrees"));
        fs::write(&m, "source = missing.txt\ntarget = b.txt\nsplit = 2/0/1\n").unwrap();
        let err = load_scenario(&m).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("missing.txt"));
        fs::write(&m, "bogus line\n").unwrap();
        assert!(load_scenario(&m).unwrap_err().to_string().contains(":1:"));
    }
}
