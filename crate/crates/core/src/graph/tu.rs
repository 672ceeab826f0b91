//! TU benchmark layout: `DS_A.txt`, `DS_graph_indicator.txt`,
//! `DS_graph_labels.txt`, optional `DS_node_labels.txt` and
//! `DS_node_attributes.txt`. Node ids are global and 1-based; tokens may
//! be separated by commas or whitespace.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Graph};
use crate::diff::Matrix;
use crate::error::{Error, Result};

fn dataset_prefix(dir: &Path) -> Result<String> {
    let base = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if dir.join(format!("{base}_graph_indicator.txt")).exists() {
        return Ok(base);
    }
    // Directory renamed: fall back to whatever indicator file is present.
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(prefix) = name.strip_suffix("_graph_indicator.txt") {
                return Ok(prefix.to_string());
            }
        }
    }
    Ok(base)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_mandatory(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Parse {
            file: file_name(path),
            line: None,
            message: "mandatory file is missing".into(),
        });
    }
    read_file(path)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn tokens(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_int(tok: &str, file: &str, line: usize) -> Result<i64> {
    tok.parse::<i64>().map_err(|_| Error::Parse {
        file: file.to_string(),
        line: Some(line),
        message: format!("expected an integer, found {tok:?}"),
    })
}

fn single_ints(text: &str, file: &str) -> Result<Vec<i64>> {
    lines(text)
        .map(|(no, l)| {
            let mut toks = tokens(l);
            let tok = toks.next().unwrap_or_default();
            let v = parse_int(tok, file, no)?;
            if toks.next().is_some() {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: Some(no),
                    message: "expected a single integer".into(),
                });
            }
            Ok(v)
        })
        .collect()
}

/// Parse a TU dataset directory. Graph labels are remapped to `0..K`
/// in sorted order of their original values.
pub fn parse_tu_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ds = dataset_prefix(dir)?;
    let path = |suffix: &str| -> PathBuf { dir.join(format!("{ds}_{suffix}.txt")) };

    let ind_path = path("graph_indicator");
    let ind_file = file_name(&ind_path);
    let indicator = single_ints(&read_mandatory(&ind_path)?, &ind_file)?;
    let edge_path = path("A");
    let edge_file = file_name(&edge_path);
    let edge_text = read_mandatory(&edge_path)?;
    let label_path = path("graph_labels");
    let label_file = file_name(&label_path);
    let graph_labels = single_ints(&read_mandatory(&label_path)?, &label_file)?;

    // Graph ids in order of first appearance must be contiguous blocks; we
    // only require that each indicator value names one graph.
    let distinct: Vec<i64> = {
        let mut v = indicator.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let graph_index: BTreeMap<i64, usize> =
        distinct.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let num_graphs = distinct.len();
    if graph_labels.len() != num_graphs {
        return Err(Error::Integrity {
            file: label_file,
            line: graph_labels.len().min(num_graphs) + 1,
            message: format!(
                "{} graph labels for {num_graphs} graphs",
                graph_labels.len()
            ),
        });
    }

    // Global node → (graph, local index).
    let mut local = Vec::with_capacity(indicator.len());
    let mut sizes = vec![0usize; num_graphs];
    for &g in &indicator {
        let gi = graph_index[&g];
        local.push((gi, sizes[gi]));
        sizes[gi] += 1;
    }
    let num_nodes = indicator.len();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (no, l) in lines(&edge_text) {
        let toks: Vec<&str> = tokens(l).collect();
        if toks.len() != 2 {
            return Err(Error::Parse {
                file: edge_file.clone(),
                line: Some(no),
                message: format!("expected two node ids, found {} tokens", toks.len()),
            });
        }
        let a = parse_int(toks[0], &edge_file, no)?;
        let b = parse_int(toks[1], &edge_file, no)?;
        let in_range = |v: i64| v >= 1 && (v as usize) <= num_nodes;
        if !in_range(a) || !in_range(b) {
            return Err(Error::Integrity {
                file: edge_file.clone(),
                line: no,
                message: format!("node id out of range 1..={num_nodes}"),
            });
        }
        let (ga, la) = local[a as usize - 1];
        let (gb, lb) = local[b as usize - 1];
        if ga != gb {
            return Err(Error::Integrity {
                file: edge_file.clone(),
                line: no,
                message: format!("edge ({a}, {b}) joins nodes of different graphs"),
            });
        }
        edges[ga].push((la, lb));
    }

    let mut blocks: Vec<Matrix> = Vec::new();

    let node_label_path = path("node_labels");
    if node_label_path.exists() {
        let file = file_name(&node_label_path);
        let labels = single_ints(&read_file(&node_label_path)?, &file)?;
        check_node_rows(labels.len(), num_nodes, &file)?;
        let mut values = labels.clone();
        values.sort_unstable();
        values.dedup();
        let mut onehot = Matrix::zeros(num_nodes, values.len());
        for (v, lab) in labels.iter().enumerate() {
            let col = values.binary_search(lab).expect("value present");
            onehot[(v, col)] = 1.0;
        }
        blocks.push(onehot);
    }

    let attr_path = path("node_attributes");
    if attr_path.exists() {
        let file = file_name(&attr_path);
        let text = read_file(&attr_path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (no, l) in lines(&text) {
            let row = tokens(l)
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        file: file.clone(),
                        line: Some(no),
                        message: format!("expected a real number, found {t:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Integrity {
                        file: file.clone(),
                        line: no,
                        message: format!("expected {} attributes, found {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        check_node_rows(rows.len(), num_nodes, &file)?;
        blocks.push(Matrix::from_rows(&rows));
    }

    let feature_dim: usize = blocks.iter().map(Matrix::cols).sum();
    let mut features: Vec<Matrix> = sizes.iter().map(|&n| Matrix::zeros(n, feature_dim)).collect();
    let mut offset = 0;
    for block in &blocks {
        for v in 0..num_nodes {
            let (g, l) = local[v];
            features[g].row_mut(l)[offset..offset + block.cols()].copy_from_slice(block.row(v));
        }
        offset += block.cols();
    }

    let mut original_labels = graph_labels.clone();
    original_labels.sort_unstable();
    original_labels.dedup();

    let graphs = features
        .into_iter()
        .zip(edges)
        .enumerate()
        .map(|(id, (feat, e))| {
            let label = original_labels
                .binary_search(&graph_labels[id])
                .expect("label present");
            Graph::new(id, sizes[id], e, feat, label)
        })
        .collect();

    Ok(Dataset {
        name: ds,
        graphs,
        feature_dim,
        original_labels,
    })
}

fn check_node_rows(rows: usize, num_nodes: usize, file: &str) -> Result<()> {
    if rows != num_nodes {
        return Err(Error::Integrity {
            file: file.to_string(),
            line: rows.min(num_nodes) + 1,
            message: format!("{rows} rows for {num_nodes} nodes"),
        });
    }
    Ok(())
}

/// Write `dataset` in TU layout under `dir` with prefix `dataset.name`.
/// Features, if any, go to `node_attributes`; edges are written in both
/// directions as the public datasets do.
pub fn write_tu_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut labels = String::new();
    let mut attrs = String::new();
    let mut base = 0;
    for (gi, g) in dataset.graphs.iter().enumerate() {
        for &(i, j) in &g.edges {
            let _ = writeln!(a, "{}, {}", base + i + 1, base + j + 1);
            let _ = writeln!(a, "{}, {}", base + j + 1, base + i + 1);
        }
        for v in 0..g.node_count {
            let _ = writeln!(ind, "{}", gi + 1);
            if dataset.feature_dim > 0 {
                let row: Vec<String> = g.features.row(v).iter().map(|x| x.to_string()).collect();
                let _ = writeln!(attrs, "{}", row.join(", "));
            }
        }
        let _ = writeln!(labels, "{}", dataset.original_labels[g.label]);
        base += g.node_count;
    }
    let write = |suffix: &str, body: &str| -> Result<()> {
        let p = dir.join(format!("{}_{suffix}.txt", dataset.name));
        fs::write(&p, body).map_err(|source| Error::Io { path: p, source })
    };
    write("A", &a)?;
    write("graph_indicator", &ind)?;
    write("graph_labels", &labels)?;
    if dataset.feature_dim > 0 {
        write("node_attributes", &attrs)?;
    }
    Ok(())
}
