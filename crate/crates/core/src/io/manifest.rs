//! Dataset manifests: one `#` header line, then one comma-separated record
//! per sample, `id,clear_path,depth_path,hazy_path,trans_path,A_r,A_g,A_b,beta`.
//! Paths are relative to the manifest's directory.

use super::{load_image, save_image};
use crate::dataset::{HazeSampling, SceneSample};
use crate::error::{Error, Result};
use crate::physics::TransmissionMap;
use crate::scalar::Scalar;
use crate::tensor::htf;
use crate::tensor::htf::write_atomic;
use crate::training::Sample;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const RECORD_FIELDS: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestHeader {
    pub split: String,
    pub seed: u64,
    pub count: usize,
    pub airlight_range: (f64, f64),
    pub beta_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub clear_path: PathBuf,
    pub depth_path: PathBuf,
    pub hazy_path: PathBuf,
    pub trans_path: PathBuf,
    pub airlight: [f64; 3],
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    /// Directory that relative record paths are resolved against.
    pub base: PathBuf,
}

fn path_field(p: &Path) -> Result<String> {
    let s = p
        .to_str()
        .ok_or_else(|| Error::InvalidArgument(format!("non-UTF-8 path {}", p.display())))?;
    if s.contains([',', '\n']) {
        return Err(Error::InvalidArgument(format!(
            "path {s:?} cannot be stored in a manifest"
        )));
    }
    Ok(s.to_string())
}

fn parse_range(v: &str) -> Option<(f64, f64)> {
    let (a, b) = v.split_once(':')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

impl ManifestHeader {
    pub fn to_line(&self) -> String {
        format!(
            "# hazeforge-manifest split={} seed={} count={} airlight={}:{} beta={}:{}",
            self.split,
            self.seed,
            self.count,
            self.airlight_range.0,
            self.airlight_range.1,
            self.beta_range.0,
            self.beta_range.1
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("manifest header: {what}"));
        let rest = line
            .strip_prefix("# hazeforge-manifest")
            .ok_or_else(|| bad("missing `# hazeforge-manifest` prefix"))?;
        let (mut split, mut seed, mut count, mut airlight, mut beta) =
            (None, None, None, None, None);
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(&format!("malformed field {kv:?}")))?;
            match k {
                "split" => split = Some(v.to_string()),
                "seed" => seed = v.parse().ok(),
                "count" => count = v.parse().ok(),
                "airlight" => airlight = parse_range(v),
                "beta" => beta = parse_range(v),
                _ => return Err(bad(&format!("unknown field {k:?}"))),
            }
        }
        Ok(Self {
            split: split.ok_or_else(|| bad("split"))?,
            seed: seed.ok_or_else(|| bad("seed"))?,
            count: count.ok_or_else(|| bad("count"))?,
            airlight_range: airlight.ok_or_else(|| bad("airlight"))?,
            beta_range: beta.ok_or_else(|| bad("beta"))?,
        })
    }
}

impl ManifestRecord {
    fn to_line(&self) -> Result<String> {
        let [r, g, b] = self.airlight;
        Ok(format!(
            "{},{},{},{},{},{r},{g},{b},{}",
            self.id,
            path_field(&self.clear_path)?,
            path_field(&self.depth_path)?,
            path_field(&self.hazy_path)?,
            path_field(&self.trans_path)?,
            self.beta
        ))
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != RECORD_FIELDS {
            return Err(Error::Format(format!(
                "manifest line {lineno}: expected {RECORD_FIELDS} fields, got {}",
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].trim().parse().map_err(|_| {
                Error::Format(format!("manifest line {lineno}: bad number {:?}", f[i]))
            })
        };
        if f[0].is_empty() {
            return Err(Error::Format(format!("manifest line {lineno}: empty id")));
        }
        Ok(Self {
            id: f[0].to_string(),
            clear_path: f[1].into(),
            depth_path: f[2].into(),
            hazy_path: f[3].into(),
            trans_path: f[4].into(),
            airlight: [num(5)?, num(6)?, num(7)?],
            beta: num(8)?,
        })
    }
}

impl Manifest {
    pub fn to_text(&self) -> Result<String> {
        let mut s = self.header.to_line();
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}", r.to_line()?);
        }
        Ok(s)
    }

    /// Parses manifest text; ids must be unique and match the header count.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = ManifestHeader::parse(lines.next().unwrap_or(""))?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = ManifestRecord::parse(line, i + 2)?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::Format(format!("manifest repeats id {}", r.id)));
            }
            records.push(r);
        }
        if records.len() != header.count {
            return Err(Error::Format(format!(
                "manifest header says {} records, found {}",
                header.count,
                records.len()
            )));
        }
        Ok(Self {
            header,
            records,
            base: base.to_path_buf(),
        })
    }

    /// Reads and parses `path`, then checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        for r in &m.records {
            for p in [&r.clear_path, &r.depth_path, &r.hazy_path, &r.trans_path] {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text()?.as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Loads hazy and clear images and the exact transmission maps.
    pub fn load_samples<T: Scalar>(&self) -> Result<Vec<Sample<T>>> {
        self.records
            .iter()
            .map(|r| {
                let transmission = htf::load::<T>(&self.resolve(&r.trans_path))?;
                let transmission = TransmissionMap::new(transmission)?.into_tensor();
                Ok(Sample {
                    id: r.id.clone(),
                    hazy: load_image(&self.resolve(&r.hazy_path))?,
                    clear: load_image(&self.resolve(&r.clear_path))?,
                    transmission,
                })
            })
            .collect()
    }
}

/// Writes the files of one split under `dir` and its manifest at
/// `dir/<split>.manifest`: `clear/<source>.png`, `depth/<source>.htf`,
/// `hazy/<id>.png`, `trans/<id>.htf` and a `trans/<id>.png` preview.
pub fn write_split<T: Scalar>(
    dir: &Path,
    split: &str,
    samples: &[SceneSample<T>],
    sampling: &HazeSampling,
) -> Result<Manifest> {
    if split.is_empty() || split.contains(['/', '\\', ' ']) {
        return Err(Error::InvalidArgument(format!("bad split name {split:?}")));
    }
    for sub in ["clear", "depth", "hazy", "trans"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rec = ManifestRecord {
            id: s.id.clone(),
            clear_path: PathBuf::from(format!("clear/{}.png", s.source_id)),
            depth_path: PathBuf::from(format!("depth/{}.htf", s.source_id)),
            hazy_path: PathBuf::from(format!("hazy/{}.png", s.id)),
            trans_path: PathBuf::from(format!("trans/{}.htf", s.id)),
            airlight: s.params.airlight.channel_values().map(|v| v.f64()),
            beta: s.params.beta.f64(),
        };
        save_image(&s.clear, &dir.join(&rec.clear_path))?;
        htf::save(s.depth.tensor(), &dir.join(&rec.depth_path))?;
        save_image(&s.hazy, &dir.join(&rec.hazy_path))?;
        htf::save(s.transmission.tensor(), &dir.join(&rec.trans_path))?;
        save_image(
            s.transmission.tensor(),
            &dir.join(format!("trans/{}.png", s.id)),
        )?;
        records.push(rec);
    }
    let m = Manifest {
        header: ManifestHeader {
            split: split.to_string(),
            seed: sampling.seed,
            count: records.len(),
            airlight_range: sampling.airlight_range,
            beta_range: sampling.beta_range,
        },
        records,
        base: dir.to_path_buf(),
    };
    m.save(&dir.join(format!("{split}.manifest")))?;
    Ok(m)
}
