//! Turning `--data` and its shaping flags into a dataset.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use tsgo::data::{load_idx_images, resize, to_dataset, CACHE_MAGIC};
use tsgo::{Dataset, GrayImages};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected <H>x<W>, got '{s}'"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("bad image extent '{v}'"))
        };
        Ok(Self {
            height: parse(h)?,
            width: parse(w)?,
        })
    }
}

impl std::fmt::Display for Size {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

pub enum Source {
    Images(GrayImages),
    Cache(Dataset),
}

pub fn read_source(path: &Path) -> anyhow::Result<Source> {
    let mut head = [0u8; 4];
    let n = std::fs::File::open(path)
        .and_then(|mut f| f.read(&mut head))
        .with_context(|| format!("cannot read {}", path.display()))?;
    if n == 4 && &head == CACHE_MAGIC {
        Ok(Source::Cache(Dataset::load_cache(path)?))
    } else {
        Ok(Source::Images(load_idx_images(path)?.to_gray()))
    }
}

/// How to shape an image file into training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub path: PathBuf,
    pub subset: Option<usize>,
    pub resize: Option<Size>,
    pub binarize: Option<f64>,
    pub seed: u64,
}

pub fn build_dataset(source: Source, spec: &DataSpec) -> Result<Dataset, Failure> {
    match source {
        Source::Cache(ds) => {
            if spec.resize.is_some() || spec.subset.is_some() || spec.binarize.is_some() {
                return Err(Failure::Usage(format!(
                    "{} is a prepared dataset; --resize, --subset and --binarize apply to image files",
                    spec.path.display()
                )));
            }
            Ok(ds)
        }
        Source::Images(images) => {
            let images = match spec.resize {
                Some(s) => resize(&images, s.height, s.width).map_err(usage)?,
                None => images,
            };
            let subset = spec.subset.unwrap_or(images.count);
            to_dataset(&images, subset, spec.seed, spec.binarize).map_err(usage)
        }
    }
}

pub fn load_dataset(spec: &DataSpec) -> Result<Dataset, Failure> {
    build_dataset(read_source(&spec.path)?, spec)
}

fn usage(e: tsgo::Error) -> Failure {
    match e {
        tsgo::Error::InvalidArgument(m) => Failure::Usage(m),
        other => Failure::Runtime(other.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(
            "10x12".parse::<Size>().unwrap(),
            Size {
                height: 10,
                width: 12
            }
        );
        assert!("10".parse::<Size>().is_err());
        assert!("0x3".parse::<Size>().is_err());
        assert_eq!("7X7".parse::<Size>().unwrap().to_string(), "7x7");
    }
}
