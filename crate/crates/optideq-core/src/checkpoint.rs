//! `OPTIDEQ v1` checkpoint format.
//!
//! A checkpoint is line-oriented text: the magic line, `key value` header
//! entries (model kind, dimensions, recurrence constants, cell stages and
//! seed), then one line per tensor:
//!
//! ```text
//! tensor <name> <rows> <cols> <v0> <v1> ... (row-major)
//! ```
//!
//! Values print with 17 significant digits, which round-trips every finite
//! `f64` exactly, so save followed by load is bit-exact. The impaired cell's
//! frozen per-channel draws are not stored; they re-derive from the recorded
//! seed, which reproduces them exactly.
//!
//! The same container serializes every model family; the `kind` header
//! distinguishes them.

use crate::baselines::{LogRegParams, MlpParams};
use crate::cell::{CellKind, CellSpec, StageMagnitudes};
use crate::deq::{DeqBlockParams, EnsembleModel, ModelConfig};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::train::Classifier;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

const MAGIC: &str = "OPTIDEQ v1";

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_tensor(out: &mut impl Write, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(rows * cols, data.len());
    write!(out, "tensor {name} {rows} {cols}")?;
    for v in data {
        write!(out, " {}", fmt(*v))?;
    }
    writeln!(out)?;
    Ok(())
}

pub fn save(model: &Classifier, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{MAGIC}")?;
    match model {
        Classifier::Deq(m) => {
            let cfg = &m.config;
            writeln!(f, "kind deq")?;
            writeln!(
                f,
                "cell {}",
                match cfg.cell.kind {
                    CellKind::Simple => "simple",
                    CellKind::Aoc => "aoc",
                }
            )?;
            writeln!(f, "d_in {}", cfg.d_in)?;
            writeln!(f, "d_hidden {}", cfg.d_hidden)?;
            writeln!(f, "n_blocks {}", cfg.n_blocks)?;
            writeln!(f, "alpha {}", fmt(cfg.alpha))?;
            writeln!(f, "beta {}", fmt(cfg.beta))?;
            writeln!(f, "tol {}", fmt(cfg.tol))?;
            writeln!(f, "max_iters {}", cfg.max_iters)?;
            writeln!(f, "quant_bits {}", cfg.cell.quant_bits.unwrap_or(0))?;
            writeln!(f, "rng_seed {}", cfg.cell.rng_seed)?;
            let st = &cfg.cell.stages;
            writeln!(f, "stage tanh_approx {}", fmt(st.tanh_approx))?;
            writeln!(f, "stage microled {}", fmt(st.microled))?;
            writeln!(f, "stage slm_distortion {}", fmt(st.slm_distortion))?;
            writeln!(f, "stage tia_gain {}", fmt(st.tia_gain))?;
            writeln!(f, "stage crosstalk {}", fmt(st.crosstalk))?;
            writeln!(f, "stage darkness {}", fmt(st.darkness))?;
            writeln!(f, "stage power_norm {}", u8::from(st.power_norm))?;
            writeln!(f, "stage target_rms {}", fmt(st.target_rms))?;
            for (k, b) in m.blocks.iter().enumerate() {
                write_tensor(&mut f, &format!("block{k}.w_ip"), cfg.d_hidden, cfg.d_in, b.w_ip.as_slice())?;
                write_tensor(&mut f, &format!("block{k}.b_ip"), 1, cfg.d_hidden, &b.b_ip)?;
                write_tensor(&mut f, &format!("block{k}.w"), cfg.d_hidden, cfg.d_hidden, b.w.as_slice())?;
                write_tensor(&mut f, &format!("block{k}.b"), 1, cfg.d_hidden, &b.b)?;
            }
            write_tensor(&mut f, "w_op", 2, cfg.n_blocks * cfg.d_hidden, m.w_op.as_slice())?;
            write_tensor(&mut f, "b_op", 1, 2, &m.b_op)?;
            if let Some(c) = &m.calib {
                write_tensor(&mut f, "calib", 1, 4, c)?;
            }
        }
        Classifier::Mlp(m) => {
            writeln!(f, "kind mlp")?;
            writeln!(f, "d_in {}", m.d_in())?;
            writeln!(f, "h1 {}", m.w1.rows())?;
            writeln!(f, "h2 {}", m.w2.rows())?;
            write_tensor(&mut f, "w1", m.w1.rows(), m.w1.cols(), m.w1.as_slice())?;
            write_tensor(&mut f, "b1", 1, m.b1.len(), &m.b1)?;
            write_tensor(&mut f, "w2", m.w2.rows(), m.w2.cols(), m.w2.as_slice())?;
            write_tensor(&mut f, "b2", 1, m.b2.len(), &m.b2)?;
            write_tensor(&mut f, "w3", 2, m.w3.cols(), m.w3.as_slice())?;
            write_tensor(&mut f, "b3", 1, 2, &m.b3)?;
        }
        Classifier::LogReg(m) => {
            writeln!(f, "kind logreg")?;
            writeln!(f, "d_in {}", m.d_in())?;
            write_tensor(&mut f, "w", 2, m.w.cols(), m.w.as_slice())?;
            write_tensor(&mut f, "b", 1, 2, &m.b)?;
        }
    }
    f.flush()?;
    Ok(())
}

struct Parsed {
    headers: HashMap<String, String>,
    stages: HashMap<String, String>,
    tensors: HashMap<String, (usize, usize, Vec<f64>)>,
}

fn parse(path: &Path) -> Result<Parsed> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let magic = lines.next().ok_or_else(|| Error::format("empty checkpoint"))??;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic line `{magic}`")));
    }
    let mut parsed = Parsed {
        headers: HashMap::new(),
        stages: HashMap::new(),
        tensors: HashMap::new(),
    };
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match parts.next() {
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format("tensor line missing name"))?
                    .to_string();
                let rows: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format("tensor line missing rows"))?;
                let cols: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format("tensor line missing cols"))?;
                let data: Vec<f64> = parts
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(format!("bad value in tensor `{name}`")))?;
                if data.len() != rows * cols {
                    return Err(Error::format(format!(
                        "tensor `{name}`: {} values for {rows}x{cols}",
                        data.len()
                    )));
                }
                parsed.tensors.insert(name, (rows, cols, data));
            }
            Some("stage") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format("stage line missing name"))?;
                let value = parts
                    .next()
                    .ok_or_else(|| Error::format("stage line missing value"))?;
                parsed.stages.insert(name.to_string(), value.to_string());
            }
            Some(key) => {
                let value = parts
                    .next()
                    .ok_or_else(|| Error::format(format!("header `{key}` missing value")))?;
                parsed.headers.insert(key.to_string(), value.to_string());
            }
            None => {}
        }
    }
    Ok(parsed)
}

impl Parsed {
    fn header(&self, key: &str) -> Result<&str> {
        self.headers
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::format(format!("checkpoint lacks header `{key}`")))
    }

    fn header_usize(&self, key: &str) -> Result<usize> {
        self.header(key)?
            .parse()
            .map_err(|_| Error::format(format!("bad integer header `{key}`")))
    }

    fn header_f64(&self, key: &str) -> Result<f64> {
        self.header(key)?
            .parse()
            .map_err(|_| Error::format(format!("bad float header `{key}`")))
    }

    fn stage_f64(&self, key: &str) -> Result<f64> {
        self.stages
            .get(key)
            .ok_or_else(|| Error::format(format!("checkpoint lacks stage `{key}`")))?
            .parse()
            .map_err(|_| Error::format(format!("bad stage value `{key}`")))
    }

    fn take_tensor(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let (r, c, data) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::format(format!("checkpoint lacks tensor `{name}`")))?;
        if (r, c) != (rows, cols) {
            return Err(Error::format(format!(
                "tensor `{name}` is {r}x{c}, expected {rows}x{cols}"
            )));
        }
        Ok(data)
    }
}

pub fn load(path: &Path) -> Result<Classifier> {
    let mut p = parse(path)?;
    match p.header("kind")? {
        "deq" => {
            let kind = match p.header("cell")? {
                "simple" => CellKind::Simple,
                "aoc" => CellKind::Aoc,
                other => return Err(Error::format(format!("unknown cell kind `{other}`"))),
            };
            let stages = StageMagnitudes {
                tanh_approx: p.stage_f64("tanh_approx")?,
                microled: p.stage_f64("microled")?,
                slm_distortion: p.stage_f64("slm_distortion")?,
                tia_gain: p.stage_f64("tia_gain")?,
                crosstalk: p.stage_f64("crosstalk")?,
                darkness: p.stage_f64("darkness")?,
                power_norm: p.stage_f64("power_norm")? != 0.0,
                target_rms: p.stage_f64("target_rms")?,
            };
            let quant = p.header_usize("quant_bits")?;
            let cell = CellSpec {
                kind,
                stages,
                quant_bits: if quant == 0 { None } else { Some(quant as u32) },
                rng_seed: p.header_usize("rng_seed")? as u64,
            };
            let config = ModelConfig {
                d_in: p.header_usize("d_in")?,
                d_hidden: p.header_usize("d_hidden")?,
                n_blocks: p.header_usize("n_blocks")?,
                alpha: p.header_f64("alpha")?,
                beta: p.header_f64("beta")?,
                tol: p.header_f64("tol")?,
                max_iters: p.header_usize("max_iters")?,
                cell,
            };
            let (di, dh, nb) = (config.d_in, config.d_hidden, config.n_blocks);
            let mut model = EnsembleModel::zeros(config)?;
            for k in 0..nb {
                let w_ip = p.take_tensor(&format!("block{k}.w_ip"), dh, di)?;
                let b_ip = p.take_tensor(&format!("block{k}.b_ip"), 1, dh)?;
                let w = p.take_tensor(&format!("block{k}.w"), dh, dh)?;
                let b = p.take_tensor(&format!("block{k}.b"), 1, dh)?;
                model.blocks[k] = DeqBlockParams {
                    w_ip: Mat::from_vec(dh, di, w_ip)?,
                    b_ip,
                    w: Mat::from_vec(dh, dh, w)?,
                    b,
                };
            }
            model.w_op = Mat::from_vec(2, nb * dh, p.take_tensor("w_op", 2, nb * dh)?)?;
            model.b_op = p.take_tensor("b_op", 1, 2)?;
            if kind == CellKind::Aoc {
                let c = p.take_tensor("calib", 1, 4)?;
                model.calib = Some([c[0], c[1], c[2], c[3]]);
            }
            model.validate()?;
            Ok(Classifier::Deq(model))
        }
        "mlp" => {
            let d_in = p.header_usize("d_in")?;
            let h1 = p.header_usize("h1")?;
            let h2 = p.header_usize("h2")?;
            let params = MlpParams {
                w1: Mat::from_vec(h1, d_in, p.take_tensor("w1", h1, d_in)?)?,
                b1: p.take_tensor("b1", 1, h1)?,
                w2: Mat::from_vec(h2, h1, p.take_tensor("w2", h2, h1)?)?,
                b2: p.take_tensor("b2", 1, h2)?,
                w3: Mat::from_vec(2, h2, p.take_tensor("w3", 2, h2)?)?,
                b3: p.take_tensor("b3", 1, 2)?,
            };
            Ok(Classifier::Mlp(params))
        }
        "logreg" => {
            let d_in = p.header_usize("d_in")?;
            let params = LogRegParams {
                w: Mat::from_vec(2, d_in, p.take_tensor("w", 2, d_in)?)?,
                b: p.take_tensor("b", 1, 2)?,
            };
            Ok(Classifier::LogReg(params))
        }
        other => Err(Error::format(format!("unknown model kind `{other}`"))),
    }
}
