//! Edge lists and covariate tables on disk.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::linalg::{DenseMatrix, SparseWeights};
use crate::model::SarData;

fn io_err(path: &Path, e: std::io::Error) -> SarError {
    SarError::Io { path: path.display().to_string(), source: e }
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> SarError {
    SarError::Parse { path: path.display().to_string(), line, reason: reason.into() }
}

/// One directed edge `i j` per line, `#` comments, blank lines ignored. Ids are shifted to
/// 0-based when `one_based`. Duplicate edges collapse; self-loops are dropped.
pub fn read_edge_list(path: &Path, one_based: bool) -> Result<Vec<(usize, usize)>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut edges = BTreeSet::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut it = body.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
        let mut id = |what: &str| -> Result<usize> {
            let tok = it.next().ok_or_else(|| parse_err(path, k + 1, format!("missing {what} node")))?;
            let v: usize = tok.parse().map_err(|_| parse_err(path, k + 1, format!("`{tok}` is not a non-negative integer")))?;
            if one_based {
                v.checked_sub(1).ok_or_else(|| parse_err(path, k + 1, "id 0 in a one-based edge list"))
            } else {
                Ok(v)
            }
        };
        let (i, j) = (id("source")?, id("target")?);
        if it.next().is_some() {
            return Err(parse_err(path, k + 1, "expected exactly two ids"));
        }
        if i != j {
            edges.insert((i, j));
        }
    }
    Ok(edges.into_iter().collect())
}

/// Writes the nonzero pattern of W as an edge list.
pub fn write_edge_list(path: &Path, w: &SparseWeights, one_based: bool) -> Result<()> {
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    let off = usize::from(one_based);
    writeln!(f, "# {} nodes, {} edges", w.n(), w.nnz()).map_err(|e| io_err(path, e))?;
    for (i, j, _) in w.csr().triplets() {
        writeln!(f, "{} {}", i + off, j + off).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Raw comma-separated table with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CovariateTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| parse_err(path, 1, e.to_string()))?;
        let header: Vec<String> = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.iter().map(String::from).collect();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(parse_err(path, 1, "missing header row"));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                parse_err(path, line, e.to_string())
            })?;
            rows.push(rec.iter().map(String::from).collect());
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Response, design matrix and node keys extracted from a covariate table.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    /// 0-based node key of each row.
    pub ids: Vec<usize>,
    pub y: Vec<f64>,
    pub x: DenseMatrix,
    pub names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignOptions {
    pub response: String,
    /// Column holding node ids; rows are nodes 0..n-1 in order when absent.
    pub id_column: Option<String>,
    pub intercept: bool,
    pub one_based: bool,
}

/// Numeric columns are used as is; any other column becomes drop-first 0/1 indicators
/// over its sorted levels.
pub fn build_design(table: &CovariateTable, path: &Path, opts: &DesignOptions) -> Result<Design> {
    let resp = table
        .column(&opts.response)
        .ok_or_else(|| SarError::InvalidInput(format!("response column `{}` not found in {}", opts.response, path.display())))?;
    let id_col = match &opts.id_column {
        Some(c) => Some(table.column(c).ok_or_else(|| SarError::InvalidInput(format!("id column `{c}` not found in {}", path.display())))?),
        None => None,
    };
    let n = table.rows.len();
    let line = |r: usize| r + 2;
    let mut ids = Vec::with_capacity(n);
    for (r, row) in table.rows.iter().enumerate() {
        let id = match id_col {
            Some(c) => {
                let v: usize = row[c].parse().map_err(|_| parse_err(path, line(r), format!("id `{}` is not a non-negative integer", row[c])))?;
                if opts.one_based {
                    v.checked_sub(1).ok_or_else(|| parse_err(path, line(r), "id 0 with one-based ids"))?
                } else {
                    v
                }
            }
            None => r,
        };
        ids.push(id);
    }
    let mut seen = BTreeSet::new();
    for (r, id) in ids.iter().enumerate() {
        if !seen.insert(*id) {
            return Err(parse_err(path, line(r), format!("duplicate node id {id}")));
        }
    }
    let y = table
        .rows
        .iter()
        .enumerate()
        .map(|(r, row)| row[resp].parse::<f64>().map_err(|_| parse_err(path, line(r), format!("response `{}` is not numeric", row[resp]))))
        .collect::<Result<Vec<_>>>()?;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    if opts.intercept {
        cols.push(vec![1.0; n]);
        names.push("intercept".to_string());
    }
    for (c, name) in table.header.iter().enumerate() {
        if c == resp || Some(c) == id_col {
            continue;
        }
        let parsed: Vec<Option<f64>> = table.rows.iter().map(|row| row[c].parse::<f64>().ok()).collect();
        if parsed.iter().all(Option::is_some) {
            cols.push(parsed.into_iter().map(Option::unwrap).collect());
            names.push(name.clone());
        } else {
            if let Some(r) = table.rows.iter().position(|row| row[c].is_empty()) {
                return Err(parse_err(path, line(r), format!("missing value in column `{name}`")));
            }
            let levels: BTreeSet<&str> = table.rows.iter().map(|row| row[c].as_str()).collect();
            for level in levels.iter().skip(1) {
                cols.push(table.rows.iter().map(|row| if row[c] == *level { 1.0 } else { 0.0 }).collect());
                names.push(format!("{name}={level}"));
            }
        }
    }
    let x = if cols.is_empty() { DenseMatrix::zeros(n, 0) } else { DenseMatrix::from_columns(&cols)? };
    Ok(Design { ids, y, x, names })
}

/// Writes `id,y,<names>` so that `build_design` with `id_column = "id"` and no intercept
/// reads the same design back.
pub fn write_covariates(path: &Path, ids: &[usize], y: &[f64], x: &DenseMatrix, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SarError::InvalidInput(e.to_string()))?;
    let csv_err = |e: csv::Error| SarError::InvalidInput(e.to_string());
    let mut header = vec!["id".to_string(), "y".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..y.len() {
        let mut rec = vec![ids[i].to_string(), format!("{:?}", y[i])];
        rec.extend((0..x.ncols()).map(|j| format!("{:?}", x[(i, j)])));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedPolicy {
    /// Remove nodes without out-edges, repeating until none remain.
    #[default]
    Drop,
    /// Keep them with zero rows in W.
    Keep,
    Error,
}

impl std::str::FromStr for IsolatedPolicy {
    type Err = SarError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(Self::Drop),
            "keep" => Ok(Self::Keep),
            "error" => Ok(Self::Error),
            other => Err(SarError::InvalidInput(format!("unknown isolated-node policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Assembled {
    pub data: SarData,
    /// Node key of each retained row, in data order.
    pub node_ids: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Row-normalized W over the nodes of `design`; every edge endpoint must be a known node.
pub fn assemble(edges: &[(usize, usize)], design: &Design, policy: IsolatedPolicy) -> Result<Assembled> {
    let pos: HashMap<usize, usize> = design.ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    let mut adj: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(i, j) in edges {
        let (Some(&a), Some(&b)) = (pos.get(&i), pos.get(&j)) else {
            let missing = if pos.contains_key(&i) { j } else { i };
            return Err(SarError::InvalidInput(format!("edge ({i}, {j}) refers to node {missing}, absent from the covariate table")));
        };
        adj.entry(a).or_default().insert(b);
    }
    let n = design.ids.len();
    let mut alive = vec![true; n];
    let out_deg = |alive: &[bool], r: usize| adj.get(&r).map_or(0, |s| s.iter().filter(|&&c| alive[c]).count());
    match policy {
        IsolatedPolicy::Keep => {}
        IsolatedPolicy::Error => {
            let iso: Vec<usize> = (0..n).filter(|&r| out_deg(&alive, r) == 0).map(|r| design.ids[r]).collect();
            if !iso.is_empty() {
                return Err(SarError::InvalidInput(format!("{} nodes have no outgoing edges, e.g. {:?}", iso.len(), &iso[..iso.len().min(5)])));
            }
        }
        IsolatedPolicy::Drop => loop {
            let iso: Vec<usize> = (0..n).filter(|&r| alive[r] && out_deg(&alive, r) == 0).collect();
            if iso.is_empty() {
                break;
            }
            for r in iso {
                alive[r] = false;
            }
        },
    }
    let kept: Vec<usize> = (0..n).filter(|&r| alive[r]).collect();
    let dropped = (0..n).filter(|&r| !alive[r]).map(|r| design.ids[r]).collect();
    let new_idx: HashMap<usize, usize> = kept.iter().enumerate().map(|(k, &r)| (r, k)).collect();
    let mut pairs = Vec::new();
    for (&a, targets) in &adj {
        if let Some(&na) = new_idx.get(&a) {
            for b in targets {
                if let Some(&nb) = new_idx.get(b) {
                    pairs.push((na, nb));
                }
            }
        }
    }
    let w = SparseWeights::adjacency(kept.len(), &pairs)?.row_normalize().weights;
    let y: Vec<f64> = kept.iter().map(|&r| design.y[r]).collect();
    let x = DenseMatrix::from_fn(kept.len(), design.x.ncols(), |i, j| design.x[(kept[i], j)]);
    let data = SarData::with_names(y, x, w, design.names.clone())?;
    Ok(Assembled { data, node_ids: kept.iter().map(|&r| design.ids[r]).collect(), dropped })
}
