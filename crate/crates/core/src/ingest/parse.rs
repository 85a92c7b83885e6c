use std::collections::HashMap;
use std::io::BufRead;

use serde_json::Value;

use super::{Corpus, ItemCatalog, UserSequence};
use crate::error::{Error, Result};

/// Accumulates (user, item, timestamp) records and builds chronologically
/// ordered sequences. Users and items are indexed by first appearance.
#[derive(Default)]
struct CorpusBuilder {
    catalog: ItemCatalog,
    user_index: HashMap<String, usize>,
    users: Vec<(String, Vec<(i64, usize)>)>,
}

impl CorpusBuilder {
    fn add(&mut self, user: &str, item: &str, timestamp: i64) {
        let item = self.catalog.intern(item);
        let u = match self.user_index.get(user) {
            Some(&u) => u,
            None => {
                self.user_index.insert(user.to_string(), self.users.len());
                self.users.push((user.to_string(), Vec::new()));
                self.users.len() - 1
            }
        };
        self.users[u].1.push((timestamp, item));
    }

    fn finish(self) -> Corpus {
        let sequences = self
            .users
            .into_iter()
            .map(|(user_id, mut events)| {
                // stable: equal timestamps keep input order
                events.sort_by_key(|&(ts, _)| ts);
                let (timestamps, items) = events.into_iter().unzip();
                UserSequence {
                    user_id,
                    items,
                    timestamps: Some(timestamps),
                }
            })
            .collect();
        Corpus {
            catalog: self.catalog,
            sequences,
        }
    }
}

#[derive(Clone, Copy)]
enum Delimiter {
    Tab,
    Comma,
    DoubleColon,
}

impl Delimiter {
    fn detect(line: &str) -> Self {
        if line.contains('\t') {
            Delimiter::Tab
        } else if line.contains("::") {
            Delimiter::DoubleColon
        } else {
            Delimiter::Comma
        }
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Tab => line.split('\t').collect(),
            Delimiter::Comma => line.split(',').collect(),
            Delimiter::DoubleColon => line.split("::").collect(),
        }
    }
}

/// Parses `user, item, rating, timestamp` records (tab, comma, or `::`
/// separated; detected from the first non-empty line). Ratings are ignored.
/// A first line whose timestamp column is not an integer is treated as a
/// header.
pub fn parse_movielens<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut builder = CorpusBuilder::default();
    let mut delimiter = None;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let delim = *delimiter.get_or_insert_with(|| Delimiter::detect(line));
        let fields: Vec<&str> = delim.split(line).iter().map(|f| f.trim()).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                line_no,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let ts = match fields[3].parse::<i64>() {
            Ok(ts) => ts,
            Err(_) if line_no == 1 => continue,
            Err(_) => {
                return Err(Error::parse(
                    line_no,
                    format!("timestamp {:?} is not an integer", fields[3]),
                ))
            }
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(line_no, "empty user or item id"));
        }
        builder.add(fields[0], fields[1], ts);
    }
    Ok(builder.finish())
}

/// Reads an item-title table keyed by item id. Accepts `movies.csv`
/// (`movieId,title,genres` with CSV quoting), `u.item` (`id|title|...`)
/// and `movies.dat` (`id::title::genres`).
pub fn parse_movielens_titles<R: BufRead>(mut reader: R) -> Result<HashMap<String, String>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut titles = HashMap::new();
    let first = text.lines().next().unwrap_or("");
    if first.contains('|') || first.contains("::") {
        let sep = if first.contains("::") { "::" } else { "|" };
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, sep);
            let (Some(id), Some(title)) = (parts.next(), parts.next()) else {
                return Err(Error::parse(n + 1, "expected id and title"));
            };
            titles.insert(id.trim().to_string(), title.trim().to_string());
        }
        return Ok(titles);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(n + 1, e.to_string()))?;
        if rec.len() < 2 {
            return Err(Error::parse(n + 1, "expected id and title"));
        }
        if n == 0 && rec[0].parse::<i64>().is_err() {
            continue;
        }
        titles.insert(rec[0].trim().to_string(), rec[1].trim().to_string());
    }
    Ok(titles)
}

fn json_str<'a>(obj: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| obj.get(*k).and_then(Value::as_str))
}

fn json_i64(obj: &Value, keys: &[&str]) -> Option<i64> {
    keys.iter().find_map(|k| match obj.get(*k)? {
        Value::Number(n) => n.as_i64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    })
}

/// Parses one-JSON-object-per-line review metadata into `product id -> title`.
pub fn parse_amazon_metadata<R: BufRead>(reader: R) -> Result<HashMap<String, String>> {
    let mut titles = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Value =
            serde_json::from_str(&line).map_err(|e| Error::parse(n + 1, e.to_string()))?;
        let Some(id) = json_str(&obj, &["asin", "parent_asin"]) else {
            return Err(Error::parse(n + 1, "metadata record without product id"));
        };
        let title = json_str(&obj, &["title"]).unwrap_or("");
        titles.insert(id.to_string(), title.to_string());
    }
    Ok(titles)
}

/// Parses Amazon reviews (`reviewerID`, `asin`, `unixReviewTime`) and attaches
/// titles from the metadata stream. Products without metadata keep an empty
/// title; [`super::drop_untitled`] removes them.
pub fn parse_amazon_reviews<R: BufRead, M: BufRead>(reviews: R, metadata: M) -> Result<Corpus> {
    let mut builder = CorpusBuilder::default();
    for (n, line) in reviews.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Value =
            serde_json::from_str(&line).map_err(|e| Error::parse(n + 1, e.to_string()))?;
        let user = json_str(&obj, &["reviewerID", "user_id"]);
        let item = json_str(&obj, &["asin", "parent_asin"]);
        let ts = json_i64(&obj, &["unixReviewTime", "timestamp"]);
        match (user, item, ts) {
            (Some(u), Some(i), Some(t)) => builder.add(u, i, t),
            _ => {
                return Err(Error::parse(
                    n + 1,
                    "review needs reviewer id, product id and unix timestamp",
                ))
            }
        }
    }
    let mut corpus = builder.finish();
    corpus.attach_titles(&parse_amazon_metadata(metadata)?);
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorts_one_user_by_timestamp() {
        let data = "u1,a,5,30\nu1,b,3,10\nu1,c,4,20\n";
        let c = parse_movielens(data.as_bytes()).unwrap();
        assert_eq!(c.sequences.len(), 1);
        let ids: Vec<&str> = c.sequences[0]
            .items
            .iter()
            .map(|&i| c.catalog.external_id(i))
            .collect();
        assert_eq!(ids, ["b", "c", "a"]);
        assert_eq!(c.sequences[0].timestamps.as_deref(), Some(&[10, 20, 30][..]));
    }

    #[test]
    fn empty_stream_gives_empty_corpus() {
        let c = parse_movielens("".as_bytes()).unwrap();
        assert!(c.sequences.is_empty());
        assert!(c.catalog.is_empty());
    }

    /// Sort-then-group oracle: stable sort all records by (first appearance of
    /// user, timestamp) and group.
    #[test]
    fn interleaved_users_match_sort_then_group_oracle() {
        let records = [
            ("u2", "x", 7),
            ("u1", "a", 3),
            ("u2", "y", 1),
            ("u1", "b", 3),
            ("u1", "c", 1),
            ("u2", "z", 9),
            ("u2", "x", 4),
        ];
        let text: String = records
            .iter()
            .map(|(u, i, t)| format!("{u}\t{i}\t1.0\t{t}\n"))
            .collect();
        let c = parse_movielens(text.as_bytes()).unwrap();

        let mut users: Vec<&str> = Vec::new();
        for (u, _, _) in &records {
            if !users.contains(u) {
                users.push(u);
            }
        }
        for (ui, user) in users.iter().enumerate() {
            let mut own: Vec<(usize, &(&str, &str, i64))> = records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.0 == *user)
                .collect();
            own.sort_by(|a, b| a.1 .2.cmp(&b.1 .2).then(a.0.cmp(&b.0)));
            let expect: Vec<&str> = own.iter().map(|(_, r)| r.1).collect();
            let got: Vec<&str> = c.sequences[ui]
                .items
                .iter()
                .map(|&i| c.catalog.external_id(i))
                .collect();
            assert_eq!(c.sequences[ui].user_id, *user);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn header_is_skipped_and_bad_lines_name_line_number() {
        let data = "userId,movieId,rating,timestamp\n1,10,4.0,100\n";
        let c = parse_movielens(data.as_bytes()).unwrap();
        assert_eq!(c.interaction_count(), 1);

        let bad = "1,10,4.0,100\n1,11,4.0\n";
        match parse_movielens(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_ts = "1,10,4.0,100\n1,11,4.0,soon\n";
        assert!(matches!(
            parse_movielens(bad_ts.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_triples_are_kept() {
        let data = "1\t5\t3\t10\n1\t5\t3\t10\n";
        let c = parse_movielens(data.as_bytes()).unwrap();
        assert_eq!(c.sequences[0].items, vec![0, 0]);
    }

    #[test]
    fn movielens_title_formats() {
        let csv = "movieId,title,genres\n1,Toy Story (1995),Animation\n2,\"American President, The (1995)\",Drama\n";
        let t = parse_movielens_titles(csv.as_bytes()).unwrap();
        assert_eq!(t["1"], "Toy Story (1995)");
        assert_eq!(t["2"], "American President, The (1995)");

        let item = "1|Toy Story (1995)|01-Jan-1995||http://x|0|0\n";
        let t = parse_movielens_titles(item.as_bytes()).unwrap();
        assert_eq!(t["1"], "Toy Story (1995)");
    }

    #[test]
    fn amazon_titles_from_metadata() {
        let reviews = r#"{"reviewerID": "r1", "asin": "p1", "unixReviewTime": 20}
{"reviewerID": "r2", "asin": "p1", "unixReviewTime": 10}
{"reviewerID": "r2", "asin": "p2", "unixReviewTime": 5}
"#;
        let meta = r#"{"asin": "p1", "title": "Lip Balm"}"#;
        let c = parse_amazon_reviews(reviews.as_bytes(), meta.as_bytes()).unwrap();
        let p1 = c.catalog.index_of("p1").unwrap();
        let p2 = c.catalog.index_of("p2").unwrap();
        assert_eq!(c.catalog.title(p1), "Lip Balm");
        assert_eq!(c.catalog.title(p2), "");
        assert_eq!(c.sequences[1].items, vec![p2, p1]);
    }

    #[test]
    fn amazon_full_grid_enumeration() {
        // 5 users x 5 products, every pair reviewed once
        let mut reviews = String::new();
        let mut meta = String::new();
        for p in 0..5 {
            meta.push_str(&format!("{{\"asin\": \"p{p}\", \"title\": \"T{p}\"}}\n"));
        }
        for u in 0..5 {
            for p in 0..5 {
                reviews.push_str(&format!(
                    "{{\"reviewerID\": \"u{u}\", \"asin\": \"p{p}\", \"unixReviewTime\": {}}}\n",
                    (u * 7 + p * 3) % 11
                ));
            }
        }
        let c = parse_amazon_reviews(reviews.as_bytes(), meta.as_bytes()).unwrap();
        assert_eq!(c.sequences.len(), 5);
        assert!(c.sequences.iter().all(|s| s.len() == 5));
        for s in &c.sequences {
            let ts = s.timestamps.as_ref().unwrap();
            assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn amazon_bad_line_reports_position() {
        let reviews = "{\"reviewerID\": \"r1\", \"asin\": \"p1\", \"unixReviewTime\": 1}\nnot json\n";
        assert!(matches!(
            parse_amazon_reviews(reviews.as_bytes(), "".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
