//! Text container for a [`TaskPool`].
//!
//! Whitespace-separated tokens; every real is written as the 16 hex digits
//! of its IEEE-754 bit pattern so a round trip is bit-exact.
//!
//! ```text
//! adapterlab-pool 1
//! tasks <N>
//! task <i> <residual|prepend>
//!   classes <K>  (<p0> <p1> <p2> <class_token>) × K
//!   ridge <hex>
//!   mean <d> <hex>×d
//!   cov <d> <d> <hex>×d²
//!   key <d> <hex>×d
//!   image <layers>  (mat)×layers or (mat mat)×layers
//!   text <layers>   likewise
//! end
//! ```
//!
//! A `mat` is `<rows> <cols>` followed by `rows·cols` hex reals, row-major.
//! Residual layers store keys then values; prepend layers store prompts.

use std::fmt::Write as _;
use std::path::Path;

use super::{AdapterSet, PoolEntry, PromptSet, TaskParams, TaskPool};
use crate::attention::{Adapter, PromptBaseline};
use crate::backbone::ClassTemplate;
use crate::error::{Error, Result};
use crate::numkernel::Mat;
use crate::taskdist::TaskGaussian;

pub const POOL_MAGIC: &str = "adapterlab-pool";
const POOL_VERSION: u32 = 1;

pub fn write_pool(pool: &TaskPool, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pool(pool))?;
    Ok(())
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<TaskPool> {
    decode_pool(&std::fs::read_to_string(path)?)
}

pub(crate) fn encode_pool(pool: &TaskPool) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{POOL_MAGIC} {POOL_VERSION}");
    let _ = writeln!(out, "tasks {}", pool.len());
    for (i, e) in pool.entries().iter().enumerate() {
        let kind = if e.params.is_residual() { "residual" } else { "prepend" };
        let _ = writeln!(out, "task {i} {kind}");
        let _ = write!(out, "classes {}", e.classes.len());
        for c in &e.classes {
            let _ = write!(out, " {} {} {} {}", c.prefix[0], c.prefix[1], c.prefix[2], c.class_token);
        }
        out.push('\n');
        let _ = writeln!(out, "ridge {}", hex(e.gaussian.ridge()));
        write_vec(&mut out, "mean", e.gaussian.mean());
        let _ = write!(out, "cov ");
        write_mat(&mut out, e.gaussian.cov());
        write_vec(&mut out, "key", &e.mean_key);
        match &e.params {
            TaskParams::Residual(a) => {
                for (name, layers) in [("image", &a.image), ("text", &a.text)] {
                    let _ = writeln!(out, "{name} {}", layers.len());
                    for adapter in layers {
                        write_mat(&mut out, adapter.keys());
                        write_mat(&mut out, adapter.values());
                    }
                }
            }
            TaskParams::Prepend(p) => {
                for (name, layers) in [("image", &p.image), ("text", &p.text)] {
                    let _ = writeln!(out, "{name} {}", layers.len());
                    for prompt in layers {
                        write_mat(&mut out, prompt.prompts());
                    }
                }
            }
        }
    }
    out.push_str("end\n");
    out
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn write_vec(out: &mut String, name: &str, v: &[f64]) {
    let _ = write!(out, "{name} {}", v.len());
    for x in v {
        let _ = write!(out, " {}", hex(*x));
    }
    out.push('\n');
}

fn write_mat(out: &mut String, m: &Mat) {
    let _ = write!(out, "{} {}", m.rows(), m.cols());
    for x in m.data() {
        let _ = write!(out, " {}", hex(*x));
    }
    out.push('\n');
}

struct Tokens<'a> {
    inner: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.inner.next().ok_or_else(|| Error::Format("unexpected end of pool file".into()))
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let got = self.next()?;
        if got != word {
            return Err(Error::Format(format!("expected `{word}`, found `{got}`")));
        }
        Ok(())
    }

    fn usize(&mut self) -> Result<usize> {
        let t = self.next()?;
        t.parse().map_err(|_| Error::Format(format!("expected an integer, found `{t}`")))
    }

    fn real(&mut self) -> Result<f64> {
        let t = self.next()?;
        if t.len() != 16 {
            return Err(Error::Format(format!("expected 16 hex digits, found `{t}`")));
        }
        let bits = u64::from_str_radix(t, 16).map_err(|_| Error::Format(format!("bad hex real `{t}`")))?;
        Ok(f64::from_bits(bits))
    }

    fn vec(&mut self, name: &str) -> Result<Vec<f64>> {
        self.expect(name)?;
        let n = self.usize()?;
        (0..n).map(|_| self.real()).collect()
    }

    fn mat(&mut self) -> Result<Mat> {
        let (r, c) = (self.usize()?, self.usize()?);
        let data = (0..r * c).map(|_| self.real()).collect::<Result<Vec<_>>>()?;
        Mat::from_vec(r, c, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn decode_pool(text: &str) -> Result<TaskPool> {
    let mut t = Tokens { inner: text.split_whitespace() };
    t.expect(POOL_MAGIC)?;
    let version = t.usize()?;
    if version != POOL_VERSION as usize {
        return Err(Error::Format(format!("unsupported pool version {version}")));
    }
    t.expect("tasks")?;
    let n = t.usize()?;
    let mut pool = TaskPool::new();
    for i in 0..n {
        t.expect("task")?;
        if t.usize()? != i {
            return Err(Error::Format(format!("task {i} out of order")));
        }
        let residual = match t.next()? {
            "residual" => true,
            "prepend" => false,
            other => return Err(Error::Format(format!("unknown task kind `{other}`"))),
        };
        t.expect("classes")?;
        let k = t.usize()?;
        let classes = (0..k)
            .map(|_| Ok(ClassTemplate { prefix: [t.usize()?, t.usize()?, t.usize()?], class_token: t.usize()? }))
            .collect::<Result<Vec<_>>>()?;
        t.expect("ridge")?;
        let ridge = t.real()?;
        let mean = t.vec("mean")?;
        t.expect("cov")?;
        let cov = t.mat()?;
        let gaussian = TaskGaussian::from_parts(mean, cov, ridge)?;
        let mean_key = t.vec("key")?;
        let mut sides = Vec::with_capacity(2);
        for name in ["image", "text"] {
            t.expect(name)?;
            let layers = t.usize()?;
            let mut mats = Vec::with_capacity(layers);
            for _ in 0..layers {
                if residual {
                    let keys = t.mat()?;
                    let values = t.mat()?;
                    mats.push((keys, Some(values)));
                } else {
                    mats.push((t.mat()?, None));
                }
            }
            sides.push(mats);
        }
        let text_side = sides.pop().expect("two sides");
        let image_side = sides.pop().expect("two sides");
        let params = if residual {
            let build = |side: Vec<(Mat, Option<Mat>)>| {
                side.into_iter().map(|(k, v)| Adapter::new(k, v.expect("residual values"))).collect::<Result<Vec<_>>>()
            };
            TaskParams::Residual(AdapterSet { image: build(image_side)?, text: build(text_side)? })
        } else {
            let build =
                |side: Vec<(Mat, Option<Mat>)>| side.into_iter().map(|(p, _)| PromptBaseline::new(p)).collect::<Result<Vec<_>>>();
            TaskParams::Prepend(PromptSet { image: build(image_side)?, text: build(text_side)? })
        };
        pool.push(PoolEntry { params, gaussian, mean_key, classes })?;
    }
    t.expect("end")?;
    Ok(pool)
}
