//! CSV emission and parsing for histories, evaluation results and
//! comparison tables. Floats are written in Rust's shortest round-trip form
//! so `parse(emit(x)) == x`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use unida_core::eval::EvalResult;
use unida_core::scenario::SplitSpec;
use unida_core::trainer::TrainHistory;

pub const HISTORY_HEADER: &str = "step,lr,cls,ova,oem,nil,cmm,cc,total";
pub const EVAL_HEADER: &str = "label,threshold,os_star,unk,hsc,n_known,n_unknown,per_class";
pub const CELLS_HEADER: &str = "variant,task,seed,os_star,unk,hsc";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    pub ova: f64,
    pub oem: f64,
    pub nil: f64,
    pub cmm: f64,
    pub cc: f64,
    pub total: f64,
}

impl HistoryRow {
    pub fn from_history(history: &TrainHistory) -> Vec<HistoryRow> {
        history
            .steps
            .iter()
            .map(|s| {
                let r = &s.report;
                HistoryRow {
                    step: s.step,
                    lr: s.lr,
                    cls: r.cls,
                    ova: r.ova,
                    oem: r.oem,
                    nil: r.nil,
                    cmm: r.cmm,
                    cc: r.cc,
                    total: r.total,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvError {
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for CsvError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for CsvError {}

fn field<T: FromStr>(value: &str, line: usize, name: &str) -> Result<T, CsvError> {
    value.parse().map_err(|_| CsvError {
        line,
        msg: format!("bad {name} '{value}'"),
    })
}

/// Data rows (1-based line numbers) after checking the header.
fn rows<'a>(
    text: &'a str,
    header: &str,
    width: usize,
) -> Result<Vec<(usize, Vec<&'a str>)>, CsvError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => {
            return Err(CsvError {
                line: 1,
                msg: format!("expected header '{header}'"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width {
                return Err(CsvError {
                    line: i + 1,
                    msg: format!("expected {width} fields, found {}", f.len()),
                });
            }
            Ok((i + 1, f))
        })
        .collect()
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.lr, r.cls, r.ova, r.oem, r.nil, r.cmm, r.cc, r.total
        )
        .unwrap();
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>, CsvError> {
    rows(text, HISTORY_HEADER, 9)?
        .into_iter()
        .map(|(n, f)| {
            let x = |i: usize, name: &str| field::<f64>(f[i], n, name);
            Ok(HistoryRow {
                step: field(f[0], n, "step")?,
                lr: x(1, "lr")?,
                cls: x(2, "cls")?,
                ova: x(3, "ova")?,
                oem: x(4, "oem")?,
                nil: x(5, "nil")?,
                cmm: x(6, "cmm")?,
                cc: x(7, "cc")?,
                total: x(8, "total")?,
            })
        })
        .collect()
}

/// An [`EvalResult`] tagged with the run it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub result: EvalResult,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in rows {
        let e = &r.result;
        let per_class: Vec<String> = e
            .per_class
            .iter()
            .map(|(c, a)| format!("{c}:{a}"))
            .collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.label,
            e.reject_threshold,
            e.os_star,
            e.unk,
            e.hsc,
            e.n_known,
            e.n_unknown,
            per_class.join(";")
        )
        .unwrap();
    }
    out
}

pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalRow>, CsvError> {
    rows(text, EVAL_HEADER, 8)?
        .into_iter()
        .map(|(n, f)| {
            let mut per_class = BTreeMap::new();
            for item in f[7].split(';').filter(|s| !s.is_empty()) {
                let (c, a) = item.split_once(':').ok_or_else(|| CsvError {
                    line: n,
                    msg: format!("bad per-class entry '{item}'"),
                })?;
                per_class.insert(field(c, n, "class id")?, field(a, n, "accuracy")?);
            }
            Ok(EvalRow {
                label: f[0].to_string(),
                result: EvalResult {
                    reject_threshold: field(f[1], n, "threshold")?,
                    os_star: field(f[2], n, "os_star")?,
                    unk: field(f[3], n, "unk")?,
                    hsc: field(f[4], n, "hsc")?,
                    n_known: field(f[5], n, "n_known")?,
                    n_unknown: field(f[6], n, "n_unknown")?,
                    per_class,
                },
            })
        })
        .collect()
}

/// One trained (variant, task, seed) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub variant: String,
    pub task: SplitSpec,
    pub seed: u64,
    pub os_star: f64,
    pub unk: f64,
    pub hsc: f64,
}

pub fn cells_csv(cells: &[Cell]) -> String {
    let mut out = format!("{CELLS_HEADER}\n");
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.variant, c.task, c.seed, c.os_star, c.unk, c.hsc
        )
        .unwrap();
    }
    out
}

pub fn parse_cells_csv(text: &str) -> Result<Vec<Cell>, CsvError> {
    rows(text, CELLS_HEADER, 6)?
        .into_iter()
        .map(|(n, f)| {
            Ok(Cell {
                variant: f[0].to_string(),
                task: field(f[1], n, "task")?,
                seed: field(f[2], n, "seed")?,
                os_star: field(f[3], n, "os_star")?,
                unk: field(f[4], n, "unk")?,
                hsc: field(f[5], n, "hsc")?,
            })
        })
        .collect()
}

/// Variants × tasks grid of HSC percentages (mean over seeds).
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub variants: Vec<String>,
    pub tasks: Vec<SplitSpec>,
    /// `cells[v][t]`, in percent
    pub cells: Vec<Vec<f64>>,
}

impl ComparisonTable {
    /// Averages each (variant, task) over its seeds. Variants and tasks keep
    /// the given order.
    pub fn from_cells(variants: &[String], tasks: &[SplitSpec], runs: &[Cell]) -> Self {
        let cells = variants
            .iter()
            .map(|v| {
                tasks
                    .iter()
                    .map(|t| {
                        let hs: Vec<f64> = runs
                            .iter()
                            .filter(|c| &c.variant == v && &c.task == t)
                            .map(|c| c.hsc)
                            .collect();
                        if hs.is_empty() {
                            f64::NAN
                        } else {
                            100.0 * hs.iter().sum::<f64>() / hs.len() as f64
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            variants: variants.to_vec(),
            tasks: tasks.to_vec(),
            cells,
        }
    }

    pub fn averages(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }

    /// Tasks on which each variant attains the column maximum (ties all win).
    pub fn wins(&self) -> Vec<usize> {
        let mut wins = vec![0; self.variants.len()];
        for t in 0..self.tasks.len() {
            let best = self
                .cells
                .iter()
                .map(|r| r[t])
                .fold(f64::NEG_INFINITY, f64::max);
            for (v, row) in self.cells.iter().enumerate() {
                if row[t] == best {
                    wins[v] += 1;
                }
            }
        }
        wins
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["variant".to_string()];
        h.extend(self.tasks.iter().map(|t| format!("({t})")));
        h.push("avg".into());
        h.push("wins".into());
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",") + "\n";
        for ((name, row), (avg, wins)) in self
            .variants
            .iter()
            .zip(&self.cells)
            .zip(self.averages().into_iter().zip(self.wins()))
        {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{name},{},{avg},{wins}", vals.join(",")).unwrap();
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output and checks the derived columns.
    pub fn from_csv(text: &str) -> Result<Self, CsvError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
        let (_, header) = lines.next().ok_or(CsvError {
            line: 1,
            msg: "empty table".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "variant" || cols[cols.len() - 2..] != ["avg", "wins"] {
            return Err(CsvError {
                line: 1,
                msg: "expected header 'variant,(a/b/c)...,avg,wins'".into(),
            });
        }
        let tasks = cols[1..cols.len() - 2]
            .iter()
            .map(|c| {
                c.strip_prefix('(')
                    .and_then(|c| c.strip_suffix(')'))
                    .ok_or_else(|| CsvError {
                        line: 1,
                        msg: format!("task column '{c}' is not '(a/b/c)'"),
                    })
                    .and_then(|c| field::<SplitSpec>(c, 1, "task"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut table = ComparisonTable {
            variants: Vec::new(),
            tasks,
            cells: Vec::new(),
        };
        let mut derived = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(CsvError {
                    line: i + 1,
                    msg: format!("expected {} fields, found {}", cols.len(), f.len()),
                });
            }
            table.variants.push(f[0].to_string());
            table.cells.push(
                f[1..f.len() - 2]
                    .iter()
                    .map(|v| field::<f64>(v, i + 1, "cell"))
                    .collect::<Result<_, _>>()?,
            );
            let avg: f64 = field(f[f.len() - 2], i + 1, "avg")?;
            let wins: usize = field(f[f.len() - 1], i + 1, "wins")?;
            derived.push((i + 1, avg, wins));
        }
        for ((line, avg, wins), (a, w)) in derived
            .into_iter()
            .zip(table.averages().into_iter().zip(table.wins()))
        {
            if (avg - a).abs() > 1e-9 || wins != w {
                return Err(CsvError {
                    line,
                    msg: "avg/wins disagree with the cells".into(),
                });
            }
        }
        Ok(table)
    }

    /// Aligned text with HSC percentages to one decimal.
    pub fn to_text(&self) -> String {
        let header = {
            let mut h = self.header();
            h[0] = "Method".into();
            h[self.tasks.len() + 1] = "Avg".into();
            h[self.tasks.len() + 2] = "Wins".into();
            h
        };
        let mut rows = vec![header];
        for ((name, row), wins) in self.variants.iter().zip(&self.cells).zip(self.wins()) {
            let shown: Vec<String> = row.iter().map(|v| format!("{v:.1}")).collect();
            // average of the printed cells, so a reader can recompute it
            let shown_avg = shown
                .iter()
                .map(|c| c.parse::<f64>().unwrap_or(f64::NAN))
                .sum::<f64>()
                / shown.len() as f64;
            let mut r = vec![name.clone()];
            r.extend(shown);
            r.push(format!("{shown_avg:.1}"));
            r.push(wins.to_string());
            rows.push(r);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    if c == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(s: &str) -> SplitSpec {
        s.parse().unwrap()
    }

    #[test]
    fn table_layout() {
        let t = ComparisonTable {
            variants: vec!["uniform".into(), "weighted".into()],
            tasks: vec![split("5/2/3"), split("10/10/11")],
            cells: vec![vec![80.0, 71.25], vec![85.5, 71.25]],
        };
        assert_eq!(t.wins(), vec![1, 2]);
        let csv = t.to_csv();
        assert!(csv.starts_with("variant,(5/2/3),(10/10/11),avg,wins\n"));
        assert_eq!(ComparisonTable::from_csv(&csv).unwrap(), t);
        let text = t.to_text();
        assert!(text.contains("(10/10/11)"));
        assert!(text.contains("85.5"));
        assert!(text.contains("71.3") || text.contains("71.2"));
    }

    #[test]
    fn tampered_derived_columns_are_rejected() {
        let csv = "variant,(5/2/3),avg,wins\nweighted,90,80,1\n";
        assert!(ComparisonTable::from_csv(csv).is_err());
    }

    #[test]
    fn cell_averaging() {
        let runs = vec![
            Cell {
                variant: "a".into(),
                task: split("2/0/1"),
                seed: 0,
                os_star: 1.0,
                unk: 1.0,
                hsc: 0.5,
            },
            Cell {
                variant: "a".into(),
                task: split("2/0/1"),
                seed: 1,
                os_star: 1.0,
                unk: 1.0,
                hsc: 0.7,
            },
        ];
        let t = ComparisonTable::from_cells(&["a".into()], &[split("2/0/1")], &runs);
        assert!((t.cells[0][0] - 60.0).abs() < 1e-12);
        assert_eq!(parse_cells_csv(&cells_csv(&runs)).unwrap(), runs);
    }

    #[test]
    fn history_header_and_errors() {
        assert!(parse_history_csv("nope\n").is_err());
        let err = parse_history_csv(&format!("{HISTORY_HEADER}\n1,2,3\n")).unwrap_err();
        assert_eq!(err.line, 2);
    }
}
