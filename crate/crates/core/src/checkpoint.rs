//! Text checkpoint format, version 1.
//!
//! ```text
//! ctrlab-checkpoint v1
//! meta<TAB>key<TAB>value            (zero or more)
//! param<TAB>name<TAB>trainable<TAB>d1,d2,...
//! v v v ...                          (row-major values, one line per param)
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "ctrlab-checkpoint";
pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta\t{k}\t{v}");
        }
        for (_, p) in self.params.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "param\t{}\t{}\t{}", p.name, u8::from(p.trainable), dims.join(","));
            let mut first = true;
            for v in p.value.data() {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(err(1, format!("not a checkpoint header: `{header}`")));
        }
        let version = parts.next().unwrap_or("");
        if version != CHECKPOINT_VERSION {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                found: version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let mut ckpt = Checkpoint::default();
        let mut ended = false;
        while let Some((no, line)) = lines.next() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "meta" if fields.len() == 3 => {
                    ckpt.meta.insert(fields[1].to_string(), fields[2].to_string());
                }
                "param" if fields.len() == 4 => {
                    let trainable = match fields[2] {
                        "0" => false,
                        "1" => true,
                        other => return Err(err(no, format!("bad trainable flag `{other}`"))),
                    };
                    let shape = if fields[3].is_empty() {
                        vec![]
                    } else {
                        fields[3]
                            .split(',')
                            .map(|d| d.parse::<usize>().map_err(|e| err(no, format!("bad dimension `{d}`: {e}"))))
                            .collect::<Result<Vec<_>>>()?
                    };
                    let (vno, values) = lines.next().ok_or_else(|| err(no + 1, "missing value line".into()))?;
                    let data = values
                        .split(' ')
                        .filter(|s| !s.is_empty())
                        .map(|v| v.parse::<f64>().map_err(|e| err(vno, format!("bad value `{v}`: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let tensor = Tensor::new(shape, data).map_err(|e| err(vno, e.to_string()))?;
                    let id = ckpt.params.add(fields[1], tensor).map_err(|e| err(no, e.to_string()))?;
                    ckpt.params.set_trainable(id, trainable);
                }
                "end" if fields.len() == 1 => {
                    ended = true;
                    break;
                }
                _ => return Err(err(no, format!("unrecognized line `{}`", truncate(line)))),
            }
        }
        if !ended {
            return Err(err(text.lines().count() + 1, "truncated checkpoint (missing `end`)".into()));
        }
        Ok(ckpt)
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(60) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
