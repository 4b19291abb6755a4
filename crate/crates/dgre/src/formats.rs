//! Text formats: interaction logs, graph edge lists, embedding, prototype and
//! result tables. All files are UTF-8 TSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dgre_core::data::{Dataset, MarketId, RawInteraction};
use dgre_core::eval::RankingMetrics;
use dgre_core::gnn::EmbeddingTable;
use dgre_core::graph::InteractionGraph;
use dgre_core::market_proto::MarketPrototype;
use dgre_core::numerics::Tensor2;
use dgre_core::user_proto::{assign_prototype, UserPrototypeSet};

use crate::error::{CliError, Result};

pub const INTERACTIONS_HEADER: &str = "market\tuser_id\titem_id\trating\ttimestamp";
pub const RESULTS_HEADER: &str = "market\tmetric\tk_cutoff\tvalue\tn_users";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `market user_id item_id rating timestamp`.
    Tsv,
    /// `<market>.tsv` files with `user_id item_id rating timestamp`.
    PerMarket,
}

impl Format {
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tsv" => Some(Format::Tsv),
            "per-market" => Some(Format::PerMarket),
            _ => None,
        }
    }
}

/// Nine significant digits.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Rows of `text`, skipping blank lines, with 1-based line numbers.
fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n, l.split('\t').map(str::trim).collect()))
}

/// Parses interaction rows. With `market = Some(m)` the rows have no market
/// column. A first row whose user field is not numeric is a header. Ratings
/// are read but ignored: any row is an interaction.
pub fn parse_interactions(text: &str, market: Option<&MarketId>, path: &Path) -> Result<Vec<RawInteraction>> {
    let offset = usize::from(market.is_none());
    let err = |line: usize, reason: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut out = Vec::new();
    for (k, (line, f)) in rows(text).enumerate() {
        if k == 0 && f.get(offset).is_some_and(|u| u.parse::<u64>().is_err()) {
            continue;
        }
        let n = f.len() - offset;
        if !(3..=4).contains(&n) {
            return Err(err(line, format!("expected {} or {} columns, found {}", 3 + offset, 4 + offset, f.len())));
        }
        let m = match market {
            Some(m) => m.clone(),
            None => MarketId::new(f[0]).map_err(|e| err(line, e.to_string()))?,
        };
        let int = |s: &str, what: &str| s.parse::<u64>().map_err(|_| err(line, format!("bad {what} `{s}`")));
        let user = int(f[offset], "user_id")?;
        let item = int(f[offset + 1], "item_id")?;
        f[offset + 2]
            .parse::<f64>()
            .map_err(|_| err(line, format!("bad rating `{}`", f[offset + 2])))?;
        let timestamp = match f.get(offset + 3) {
            Some(t) if !t.is_empty() => t.parse::<i64>().map_err(|_| err(line, format!("bad timestamp `{t}`")))?,
            _ => 0,
        };
        out.push(RawInteraction {
            market: m,
            user,
            item,
            timestamp,
        });
    }
    Ok(out)
}

fn market_from_stem(path: &Path) -> Result<MarketId> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    MarketId::new(stem).map_err(|e| CliError::format(path, e.to_string()))
}

/// Per-market files: `path` is either one `<market>.tsv` file or a directory
/// whose `*.tsv` files are read in name order.
fn per_market_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Files read by [`load_interactions`], for hashing.
pub fn interaction_files(path: &Path, format: Format) -> Result<Vec<PathBuf>> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    match format {
        Format::Tsv => Ok(vec![path.to_path_buf()]),
        Format::PerMarket => per_market_files(path),
    }
}

pub fn load_interactions(path: &Path, format: Format) -> Result<Dataset> {
    let mut records = Vec::new();
    for file in interaction_files(path, format)? {
        let text = read_text(&file)?;
        let market = match format {
            Format::Tsv => None,
            Format::PerMarket => Some(market_from_stem(&file)?),
        };
        records.extend(parse_interactions(&text, market.as_ref(), &file)?);
    }
    Ok(Dataset::from_records(records)?)
}

/// Canonical form with a header; rating is always 1.
pub fn format_interactions(ds: &Dataset) -> String {
    let mut s = String::from(INTERACTIONS_HEADER);
    s.push('\n');
    for r in ds.to_records() {
        let _ = writeln!(s, "{}\t{}\t{}\t1\t{}", r.market, r.user, r.item, r.timestamp);
    }
    s
}

/// Edge list over local indices (`a < b`) and the `index -> original id` sidecar.
pub fn format_graph(g: &InteractionGraph, original_id: impl Fn(usize) -> u64) -> (String, String) {
    let mut edges = String::new();
    for (a, b) in g.edges() {
        let _ = writeln!(edges, "{a}\t{b}");
    }
    let mut index = String::new();
    for (k, &node) in g.node_ids().iter().enumerate() {
        let _ = writeln!(index, "{k}\t{}", original_id(node));
    }
    (edges, index)
}

/// Inverse of [`format_graph`]; `dense_id` maps original ids back to dataset indices.
pub fn parse_graph(
    edges: &str,
    index: &str,
    dense_id: impl Fn(u64) -> Option<usize>,
    path: &Path,
) -> Result<InteractionGraph> {
    let err = |line: usize, reason: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut node_ids = Vec::new();
    for (line, f) in rows(index) {
        let [k, id] = f[..] else {
            return Err(err(line, "expected `index<TAB>id`".into()));
        };
        if k.parse::<usize>().ok() != Some(node_ids.len()) {
            return Err(err(line, format!("index `{k}` out of sequence")));
        }
        let raw = id.parse::<u64>().map_err(|_| err(line, format!("bad id `{id}`")))?;
        node_ids.push(dense_id(raw).ok_or_else(|| err(line, format!("id {raw} is not in the dataset")))?);
    }
    let mut list = Vec::new();
    for (line, f) in rows(edges) {
        let [a, b] = f[..] else {
            return Err(err(line, "expected `node_a<TAB>node_b`".into()));
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| err(line, format!("bad node `{s}`")));
        list.push((parse(a)?, parse(b)?));
    }
    InteractionGraph::from_edges(node_ids, &list).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn format_embeddings(e: &EmbeddingTable, node_id: impl Fn(usize) -> u64) -> String {
    let mut s = String::new();
    for i in 0..e.len() {
        let _ = write!(s, "{}", node_id(i));
        for &v in e.row(i) {
            let _ = write!(s, "\t{}", sig9(v));
        }
        s.push('\n');
    }
    s
}

/// `proto_idx source_node v...`; `source_node` is the original user id.
pub fn format_prototypes(p: &UserPrototypeSet, user_id: impl Fn(usize) -> u64) -> String {
    let mut s = String::new();
    for k in 0..p.len() {
        let _ = write!(s, "{k}\t{}", user_id(p.source_nodes[k]));
        for &v in p.prototype(k) {
            let _ = write!(s, "\t{}", sig9(v));
        }
        s.push('\n');
    }
    s
}

/// `user_id proto_idx W_row...` with the argmax prototype.
pub fn format_assignments(w: &Tensor2, user_id: impl Fn(usize) -> u64) -> String {
    let mut s = String::new();
    for u in 0..w.rows() {
        let _ = write!(s, "{}\t{}", user_id(u), assign_prototype(w, u));
        for &v in w.row(u) {
            let _ = write!(s, "\t{}", sig9(v));
        }
        s.push('\n');
    }
    s
}

/// `market v...` and `market item_id mi_score` for the successful markets.
pub fn format_market_prototypes<'a>(
    markets: impl IntoIterator<Item = &'a MarketPrototype>,
    item_id: impl Fn(usize) -> u64,
) -> (String, String) {
    let (mut vectors, mut selected) = (String::new(), String::new());
    for mp in markets {
        let _ = write!(vectors, "{}", mp.market);
        for &v in &mp.vector {
            let _ = write!(vectors, "\t{}", sig9(v));
        }
        vectors.push('\n');
        for s in &mp.selected {
            let _ = writeln!(selected, "{}\t{}\t{}", mp.market, item_id(s.item), sig9(s.score));
        }
    }
    (vectors, selected)
}

fn metric_value(v: f64) -> String {
    format!("{v:.6}")
}

/// One `hr` and one `ndcg` row per evaluated market, then the pooled `all` rows.
pub fn metric_rows(prefix: &str, m: &RankingMetrics, markets: &[MarketId]) -> String {
    let mut s = String::new();
    let mut row = |name: &str, hr: f64, ndcg: f64, n: usize| {
        let _ = writeln!(s, "{prefix}{name}\thr\t{}\t{}\t{n}", m.k, metric_value(hr));
        let _ = writeln!(s, "{prefix}{name}\tndcg\t{}\t{}\t{n}", m.k, metric_value(ndcg));
    };
    for (l, r) in &m.per_market {
        row(markets[*l].as_str(), r.hr, r.ndcg, r.n_users);
    }
    row("all", m.overall.hr, m.overall.ndcg, m.overall.n_users);
    s
}

pub fn format_results(m: &RankingMetrics, markets: &[MarketId]) -> String {
    format!("{RESULTS_HEADER}\n{}", metric_rows("", m, markets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<RawInteraction>> {
        parse_interactions(text, None, Path::new("x.tsv"))
    }

    #[test]
    fn three_rows_two_markets() {
        let ds = Dataset::from_records(parse("de\t1\t10\t5\t100\nde\t2\t10\t4\t101\njp\t3\t11\t1\t102\n").unwrap()).unwrap();
        assert_eq!(ds.n_markets(), 2);
        assert_eq!(ds.n_users(), 3);
    }

    #[test]
    fn header_empty_and_duplicates() {
        let rows = parse("market\tuser_id\titem_id\trating\ttimestamp\nde\t1\t10\t1\t5\nde\t1\t10\t1\t3\n").unwrap();
        let ds = Dataset::from_records(rows).unwrap();
        assert_eq!(ds.interactions().len(), 1);
        assert_eq!(ds.interactions()[0].timestamp, 3);
        let empty = Dataset::from_records(parse("").unwrap()).unwrap();
        assert_eq!(empty.n_markets(), 0);
        // Timestamp column may be absent.
        assert_eq!(parse("de\t1\t10\t1\n").unwrap()[0].timestamp, 0);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse("de\t1\t10\t1\t0\n\nde\tx\t10\t1\t0\n") {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse("de\t1\t10\t1\t0\nDE!\t2\t10\t1\t0\n") {
            Err(CliError::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("market"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("de\t1\t10\n"), Err(CliError::Parse { line: 1, .. })));
    }

    #[test]
    fn per_market_rows() {
        let de = MarketId::new("de").unwrap();
        let rows = parse_interactions("user_id\titem_id\trating\ttimestamp\n1\t2\t1\t9\n", Some(&de), Path::new("de.tsv")).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].market, de);
        assert_eq!(rows[0].timestamp, 9);
    }

    #[test]
    fn canonical_round_trip() {
        let text = "de\t5\t10\t1\t3\njp\t7\t10\t1\t0\nde\t5\t12\t1\t4\n";
        let ds = Dataset::from_records(parse(text).unwrap()).unwrap();
        let again = Dataset::from_records(parse(&format_interactions(&ds)).unwrap()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn graph_round_trip() {
        let g = InteractionGraph::from_edges(vec![1, 4, 6], &[(0, 1), (1, 2)]).unwrap();
        let ids = [100u64, 101, 102, 103, 104, 105, 106];
        let (e, i) = format_graph(&g, |n| ids[n]);
        assert_eq!(e, "0\t1\n1\t2\n");
        assert_eq!(i, "0\t101\n1\t104\n2\t106\n");
        let back = parse_graph(&e, &i, |raw| ids.iter().position(|&x| x == raw), Path::new("g")).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(sig9(-1234.5), "-1.23450000e3");
        let parsed: f64 = sig9(std::f64::consts::PI).parse().unwrap();
        assert!((parsed - std::f64::consts::PI).abs() < 5e-9);
    }
}
