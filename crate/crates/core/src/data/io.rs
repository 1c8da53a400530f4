//! Line-oriented text files for a [`DatasetBundle`].
//!
//! Every file starts with a schema line and a column line and ends with a
//! row-count footer:
//!
//! ```text
//! # ctrlab-data v1 n_items=1000 n_categories=50 user_cards=8,8,8,8 context_cards=24 max_seq_len=200
//! user_id  day  user_features  context_features  target_item  target_category  label  behavior
//! 17       0    3,5,0,7        13                412          12               1      88:4,412:12
//! # end rows=1
//! ```
//!
//! Fields are tab-separated. Lists are comma-separated and an empty list is
//! written as `-`. Behavior events are `item:category`, oldest first.
//! `pretrain.txt` has columns `user_id user_features behavior`;
//! `cat_item_table.txt` has `category items`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Behavior, BehaviorSequence, CategoryItemTable, DatasetBundle, Example, PretrainRecord};
use crate::embed::VocabSpec;
use crate::error::{Error, Result};

pub const DATA_MAGIC: &str = "# ctrlab-data";
pub const DATA_VERSION: &str = "v1";
pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const PRETRAIN_FILE: &str = "pretrain.txt";
pub const TABLE_FILE: &str = "cat_item_table.txt";

const EXAMPLE_COLUMNS: &str =
    "user_id\tday\tuser_features\tcontext_features\ttarget_item\ttarget_category\tlabel\tbehavior";
const PRETRAIN_COLUMNS: &str = "user_id\tuser_features\tbehavior";
const TABLE_COLUMNS: &str = "category\titems";

fn join<T: ToString>(values: &[T]) -> String {
    if values.is_empty() {
        "-".into()
    } else {
        values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
}

fn header(vocab: &VocabSpec, columns: &str) -> String {
    format!(
        "{DATA_MAGIC} {DATA_VERSION} n_items={} n_categories={} user_cards={} context_cards={} max_seq_len={}\n{columns}\n",
        vocab.n_items,
        vocab.n_categories,
        join(&vocab.user_feature_cards),
        join(&vocab.context_feature_cards),
        vocab.max_seq_len
    )
}

fn write_behavior(out: &mut String, s: &BehaviorSequence) {
    if s.is_empty() {
        out.push('-');
        return;
    }
    for (i, b) in s.events().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{}:{}", b.item, b.category);
    }
}

fn examples_text(vocab: &VocabSpec, examples: &[Example]) -> String {
    let mut out = header(vocab, EXAMPLE_COLUMNS);
    for ex in examples {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t",
            ex.user_id,
            ex.day,
            join(&ex.user_features),
            join(&ex.context_features),
            ex.target_item,
            ex.target_category,
            u8::from(ex.label)
        );
        write_behavior(&mut out, &ex.behavior);
        out.push('\n');
    }
    let _ = writeln!(out, "# end rows={}", examples.len());
    out
}

fn pretrain_text(vocab: &VocabSpec, records: &[PretrainRecord]) -> String {
    let mut out = header(vocab, PRETRAIN_COLUMNS);
    for r in records {
        let _ = write!(out, "{}\t{}\t", r.user_id, join(&r.user_features));
        write_behavior(&mut out, &r.behavior);
        out.push('\n');
    }
    let _ = writeln!(out, "# end rows={}", records.len());
    out
}

fn table_text(vocab: &VocabSpec, table: &CategoryItemTable) -> String {
    let mut out = header(vocab, TABLE_COLUMNS);
    for (c, items) in table.iter() {
        let _ = writeln!(out, "{c}\t{}", join(items));
    }
    let _ = writeln!(out, "# end rows={}", table.n_categories());
    out
}

/// Writes the four bundle files into `dir` (created if needed).
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let v = &bundle.vocab;
    let files = [
        (TRAIN_FILE, examples_text(v, &bundle.train)),
        (TEST_FILE, examples_text(v, &bundle.test)),
        (PRETRAIN_FILE, pretrain_text(v, &bundle.pretrain)),
        (TABLE_FILE, table_text(v, &bundle.table)),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

/// Reads and validates a bundle written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let (vocab, train) = read_file(&dir.join(TRAIN_FILE), EXAMPLE_COLUMNS, parse_example)?;
    let check = |path: PathBuf, other: VocabSpec| -> Result<()> {
        if other != vocab {
            return Err(Error::Parse { path, line: 1, msg: format!("vocabulary {other:?} differs from train file") });
        }
        Ok(())
    };
    let (v, test) = read_file(&dir.join(TEST_FILE), EXAMPLE_COLUMNS, parse_example)?;
    check(dir.join(TEST_FILE), v)?;
    let (v, pretrain) = read_file(&dir.join(PRETRAIN_FILE), PRETRAIN_COLUMNS, parse_pretrain)?;
    check(dir.join(PRETRAIN_FILE), v)?;
    let (v, rows) = read_file(&dir.join(TABLE_FILE), TABLE_COLUMNS, parse_table_row)?;
    check(dir.join(TABLE_FILE), v)?;
    let table = CategoryItemTable::from_pairs(rows.into_iter().flat_map(|(c, items)| items.into_iter().map(move |i| (i, c))))?;
    let bundle = DatasetBundle { vocab, train, test, pretrain, table };
    bundle.validate()?;
    Ok(bundle)
}

fn read_file<T>(path: &Path, columns: &str, parse: fn(&[&str]) -> std::result::Result<T, String>) -> Result<(VocabSpec, Vec<T>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let vocab = parse_header(first, path)?;
    match lines.next() {
        Some((_, l)) if l == columns => {}
        Some((no, l)) => return Err(err(no, format!("expected column line `{columns}`, found `{l}`"))),
        None => return Err(err(2, "missing column line".into())),
    }
    let n_fields = columns.split('\t').count();
    let mut rows = Vec::new();
    for (no, line) in lines {
        if let Some(rest) = line.strip_prefix("# end rows=") {
            let n: usize = rest.parse().map_err(|e| err(no, format!("bad row count `{rest}`: {e}")))?;
            if n != rows.len() {
                return Err(err(no, format!("footer says {n} rows, read {}", rows.len())));
            }
            return Ok((vocab, rows));
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n_fields {
            return Err(err(no, format!("expected {n_fields} fields, found {}", fields.len())));
        }
        rows.push(parse(&fields).map_err(|m| err(no, m))?);
    }
    Err(err(text.lines().count() + 1, "truncated file (missing `# end` footer)".into()))
}

fn parse_header(line: &str, path: &Path) -> Result<VocabSpec> {
    let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: 1, msg };
    let rest = line.strip_prefix(DATA_MAGIC).ok_or_else(|| err(format!("not a ctrlab data file: `{line}`")))?;
    let mut parts = rest.split_whitespace();
    let version = parts.next().unwrap_or("");
    if version != DATA_VERSION {
        return Err(Error::Schema { path: path.to_path_buf(), found: version.into(), expected: DATA_VERSION.into() });
    }
    let mut fields = std::collections::BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| err(format!("bad header field `{p}`")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("header lacks `{k}`")));
    let num = |k: &str| get(k)?.parse::<usize>().map_err(|e| err(format!("header `{k}`: {e}")));
    let list = |k: &str| -> Result<Vec<usize>> { parse_list(get(k)?).map_err(err) };
    Ok(VocabSpec {
        n_items: num("n_items")?,
        n_categories: num("n_categories")?,
        user_feature_cards: list("user_cards")?,
        context_feature_cards: list("context_cards")?,
        max_seq_len: num("max_seq_len")?,
    })
}

fn parse_num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| format!("bad number `{s}`: {e}"))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if s == "-" {
        return Ok(vec![]);
    }
    s.split(',').map(parse_num).collect()
}

fn parse_behavior(s: &str) -> std::result::Result<BehaviorSequence, String> {
    if s == "-" {
        return Ok(BehaviorSequence::default());
    }
    s.split(',')
        .map(|ev| {
            let (i, c) = ev.split_once(':').ok_or_else(|| format!("bad behavior event `{ev}`"))?;
            Ok(Behavior { item: parse_num(i)?, category: parse_num(c)? })
        })
        .collect::<std::result::Result<Vec<_>, String>>()
        .map(BehaviorSequence)
}

fn parse_example(f: &[&str]) -> std::result::Result<Example, String> {
    let label = match f[6] {
        "0" => false,
        "1" => true,
        other => return Err(format!("label must be 0 or 1, found `{other}`")),
    };
    Ok(Example {
        user_id: parse_num(f[0])?,
        day: parse_num(f[1])?,
        user_features: parse_list(f[2])?,
        context_features: parse_list(f[3])?,
        target_item: parse_num(f[4])?,
        target_category: parse_num(f[5])?,
        label,
        behavior: parse_behavior(f[7])?,
    })
}

fn parse_pretrain(f: &[&str]) -> std::result::Result<PretrainRecord, String> {
    Ok(PretrainRecord { user_id: parse_num(f[0])?, user_features: parse_list(f[1])?, behavior: parse_behavior(f[2])? })
}

fn parse_table_row(f: &[&str]) -> std::result::Result<(u32, Vec<u32>), String> {
    let items: Vec<u32> = parse_list(f[1])?;
    if items.is_empty() {
        return Err(format!("category {} has no items", f[0]));
    }
    Ok((parse_num(f[0])?, items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::example;

    fn bundle() -> DatasetBundle {
        let vocab = VocabSpec {
            n_items: 10,
            n_categories: 3,
            user_feature_cards: vec![3],
            context_feature_cards: vec![5],
            max_seq_len: 200,
        };
        let train = vec![
            example(0, 0, (1, 0), &[], true),
            example(1, 1, (4, 1), &[(1, 0), (2, 0)], false),
            example(0, 2, (7, 2), &[(4, 1)], true),
        ];
        let test = vec![example(1, 3, (2, 0), &[(1, 0), (2, 0), (7, 2)], false)];
        DatasetBundle::from_splits(vocab, train, test).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        save_bundle(&b, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn truncation_reports_exact_line() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle(), dir.path()).unwrap();
        let path = dir.path().join(TRAIN_FILE);
        let text = fs::read_to_string(&path).unwrap();
        // cut in the middle of the fourth line (second data row)
        let cut = text.lines().take(3).map(|l| l.len() + 1).sum::<usize>() + 5;
        fs::write(&path, &text[..cut]).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        // a cut on a line boundary loses the footer
        let whole: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        fs::write(&path, whole).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle(), dir.path()).unwrap();
        let path = dir.path().join(TEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replacen("ctrlab-data v1", "ctrlab-data v9", 1);
        fs::write(&path, text).unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
        assert!(err.to_string().contains("v9"));
    }

    #[test]
    fn out_of_vocabulary_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle(), dir.path()).unwrap();
        let path = dir.path().join(TEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("7:2", "70:2");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Data(_))));
    }
}
