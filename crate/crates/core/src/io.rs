//! CSV input and output. Every file starts with a `# config_hash=<hex>`
//! comment line followed by a mandatory header row.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, VsdmError};
use crate::sampler::SampleBatch;
use crate::schedule::BetaSchedule;

const HASH_PREFIX: &str = "# config_hash=";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| VsdmError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| VsdmError::io(path, e))
}

/// Shortest round-trip formatting of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Write a whole table.
pub fn write_table(path: &Path, config_hash: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut f = create(path)?;
    let io = |e: std::io::Error| VsdmError::io(path, e);
    writeln!(f, "{HASH_PREFIX}{config_hash}").map_err(io)?;
    let mut w = csv::Writer::from_writer(f);
    let csv_err = |e: csv::Error| VsdmError::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

/// Append rows, creating the file (hash line and header) if needed.
pub fn append_table(path: &Path, config_hash: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    if !path.exists() {
        return write_table(path, config_hash, header, rows);
    }
    let existing = read_table(path)?;
    if existing.header != header {
        return Err(VsdmError::Parse {
            path: path.to_path_buf(),
            line: existing.header_line,
            msg: format!("header {:?} does not match {:?}", existing.header, header),
        });
    }
    let f = OpenOptions::new().append(true).open(path).map_err(|e| VsdmError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    for r in rows {
        w.write_record(r).map_err(|e| VsdmError::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| VsdmError::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub config_hash: Option<String>,
    pub header: Vec<String>,
    pub header_line: usize,
    /// Rows with their 1-based physical line numbers.
    pub rows: Vec<(usize, Vec<String>)>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| VsdmError::io(path, e))?;
    let mut config_hash = None;
    let mut header = None;
    let mut header_line = 0;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VsdmError::io(path, e))?;
        let lineno = i + 1;
        if line.starts_with('#') {
            if let Some(h) = line.strip_prefix(HASH_PREFIX) {
                config_hash = Some(h.trim().to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = split_record(&line).map_err(|msg| VsdmError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        })?;
        match &header {
            None => {
                header = Some(fields);
                header_line = lineno;
            }
            Some(h) => {
                if fields.len() != h.len() {
                    return Err(VsdmError::Parse {
                        path: path.to_path_buf(),
                        line: lineno,
                        msg: format!("expected {} fields, found {}", h.len(), fields.len()),
                    });
                }
                rows.push((lineno, fields));
            }
        }
    }
    let header = header.ok_or_else(|| VsdmError::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "missing header row".into(),
    })?;
    Ok(Table {
        config_hash,
        header,
        header_line,
        rows,
    })
}

fn split_record(line: &str) -> std::result::Result<Vec<String>, String> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
    let rec = r
        .records()
        .next()
        .ok_or_else(|| "empty record".to_string())?
        .map_err(|e| e.to_string())?;
    Ok(rec.iter().map(|s| s.trim().to_string()).collect())
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn parse_f64(&self, path: &Path, line: usize, field: &str) -> Result<f64> {
        field.parse::<f64>().map_err(|_| VsdmError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("`{field}` is not a number"),
        })
    }
}

/// Sample or trajectory file contents: `states[k]` holds every chain at the
/// `k`-th distinct node in decreasing node order.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplesFile {
    pub config_hash: Option<String>,
    pub dim: usize,
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
}

impl SamplesFile {
    /// Terminal (lowest node) states.
    pub fn terminal(&self) -> &Array2<f64> {
        self.states.last().expect("at least one node")
    }
}

fn sample_header(dim: usize) -> Vec<String> {
    let mut h = vec!["n".to_string(), "t".to_string()];
    h.extend((0..dim).map(|i| format!("x_{i}")));
    h.push("chain".into());
    h
}

/// Write terminal samples, or every recorded node when `trajectories` is set.
pub fn write_samples(path: &Path, config_hash: &str, batch: &SampleBatch, schedule: &BetaSchedule, trajectories: bool) -> Result<()> {
    let dim = batch.samples.ncols();
    let mut rows = Vec::new();
    let push = |rows: &mut Vec<Vec<String>>, n: usize, x: &Array2<f64>| {
        for (c, r) in x.outer_iter().enumerate() {
            let mut row = vec![n.to_string(), fmt_f64(schedule.node_time(n))];
            row.extend(r.iter().map(|v| fmt_f64(*v)));
            row.push(c.to_string());
            rows.push(row);
        }
    };
    match (&batch.states, trajectories) {
        (Some(states), true) => {
            for n in (0..states.len()).rev() {
                push(&mut rows, n, &states[n]);
            }
        }
        (None, true) => {
            return Err(VsdmError::Sampler("trajectories were not recorded".into()));
        }
        _ => push(&mut rows, 0, &batch.samples),
    }
    write_table(path, config_hash, &sample_header(dim), &rows)
}

pub fn read_samples(path: &Path) -> Result<SamplesFile> {
    let t = read_table(path)?;
    let bad = |line: usize, msg: String| VsdmError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let nc = t.column("n").ok_or_else(|| bad(t.header_line, "missing column `n`".into()))?;
    let tc = t.column("t").ok_or_else(|| bad(t.header_line, "missing column `t`".into()))?;
    let cc = t.column("chain").ok_or_else(|| bad(t.header_line, "missing column `chain`".into()))?;
    let xcols: Vec<usize> = (0..)
        .map_while(|i| t.column(&format!("x_{i}")))
        .collect();
    if xcols.is_empty() {
        return Err(bad(t.header_line, "no `x_0` column".into()));
    }
    let dim = xcols.len();
    // node -> (time, chain -> row)
    let mut by_node: std::collections::BTreeMap<usize, (f64, Vec<(usize, Vec<f64>)>)> = Default::default();
    for (line, f) in &t.rows {
        let n: usize = f[nc].parse().map_err(|_| bad(*line, format!("`{}` is not a node index", f[nc])))?;
        let time = t.parse_f64(path, *line, &f[tc])?;
        let chain: usize = f[cc].parse().map_err(|_| bad(*line, format!("`{}` is not a chain index", f[cc])))?;
        let x = xcols.iter().map(|&c| t.parse_f64(path, *line, &f[c])).collect::<Result<Vec<_>>>()?;
        by_node.entry(n).or_insert((time, Vec::new())).1.push((chain, x));
    }
    if by_node.is_empty() {
        return Err(bad(t.header_line, "no sample rows".into()));
    }
    let chains = by_node.values().next().map(|v| v.1.len()).unwrap_or(0);
    let mut nodes = Vec::new();
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (n, (time, mut rows)) in by_node.into_iter().rev() {
        if rows.len() != chains {
            return Err(bad(t.header_line, format!("node {n} has {} chains, expected {chains}", rows.len())));
        }
        rows.sort_by_key(|r| r.0);
        let mut a = Array2::zeros((chains, dim));
        for (i, (_, x)) in rows.iter().enumerate() {
            for j in 0..dim {
                a[(i, j)] = x[j];
            }
        }
        nodes.push(n);
        times.push(time);
        states.push(a);
    }
    Ok(SamplesFile {
        config_hash: t.config_hash,
        dim,
        nodes,
        times,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SampleMode;

    fn batch() -> SampleBatch {
        let states: Vec<Array2<f64>> = (0..4)
            .map(|n| Array2::from_shape_fn((3, 2), |(c, i)| n as f64 + 0.1 * c as f64 - i as f64 / 3.0))
            .collect();
        SampleBatch {
            mode: SampleMode::OdeEuler,
            seed: 1,
            samples: states[0].clone(),
            states: Some(states),
            scores: None,
        }
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = BetaSchedule::linear(0.1, 10.0, 3).unwrap();
        let b = batch();
        let p = dir.path().join("traj.csv");
        write_samples(&p, "abc", &b, &s, true).unwrap();
        let back = read_samples(&p).unwrap();
        assert_eq!(back.config_hash.as_deref(), Some("abc"));
        assert_eq!(back.nodes, vec![3, 2, 1, 0]);
        assert_eq!(back.states[0], b.states.as_ref().unwrap()[3]);
        assert_eq!(back.terminal(), &b.samples);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# config_hash=abc\nn,t,x_0,x_1,chain\n"));

        let q = dir.path().join("samples.csv");
        write_samples(&q, "abc", &b, &s, false).unwrap();
        assert_eq!(read_samples(&q).unwrap().nodes, vec![0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "# config_hash=1\nn,t,x_0,chain\n0,0,1.0,0\n0,0,oops,1\n").unwrap();
        match read_samples(&p).unwrap_err() {
            VsdmError::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e}"),
        }
        std::fs::write(&p, "n,t,x_0,chain\n0,0,1.0\n").unwrap();
        match read_samples(&p).unwrap_err() {
            VsdmError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn append_creates_then_extends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        let h: Vec<String> = ["run_id", "metric"].iter().map(|s| s.to_string()).collect();
        append_table(&p, "h", &h, &[vec!["a".into(), "1".into()]]).unwrap();
        append_table(&p, "h", &h, &[vec!["b".into(), "2".into()]]).unwrap();
        let t = read_table(&p).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[1].0, 4);
        let other: Vec<String> = vec!["x".into()];
        assert!(append_table(&p, "h", &other, &[vec!["c".into()]]).is_err());
    }
}
