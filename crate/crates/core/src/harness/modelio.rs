use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::demand::{AlphaNet, ClassParams, DemandConfig, DemandModel, FitReport};
use crate::error::{Error, Result};
use crate::numcore::{Activation, Layer, MlpParams, Tensor};

const MAGIC: &[u8; 4] = b"DDMD";
const VERSION: u8 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.values() {
            self.f64(v);
        }
    }
    fn mlp(&mut self, m: &MlpParams) {
        self.u32(m.layers.len() as u32);
        for layer in &m.layers {
            self.u32(layer.weight.rows() as u32);
            self.u32(layer.weight.cols() as u32);
            self.u8(layer.activation.tag());
            for &v in layer.weight.values() {
                self.f64(v);
            }
            for &v in layer.bias.values() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::data_msg("model file truncated"));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn i64(&mut self) -> Result<i64> {
        let b = self.take(8)?;
        Ok(i64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(self.f64()?);
        }
        Tensor::new(shape, values)
    }
    fn mlp(&mut self) -> Result<MlpParams> {
        let n_layers = self.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let act = Activation::from_tag(self.u8()?)?;
            let mut w = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                w.push(self.f64()?);
            }
            let mut b = Vec::with_capacity(rows);
            for _ in 0..rows {
                b.push(self.f64()?);
            }
            layers.push(Layer {
                weight: Tensor::matrix(rows, cols, w)?,
                bias: Tensor::vector(b),
                activation: act,
            });
        }
        Ok(MlpParams { layers })
    }
}

/// Serializes the fitted model as a tagged binary with a version byte.
/// Round-trips bit-exactly (f64 bit patterns preserved).
pub fn save_model(path: &Path, model: &DemandModel) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u8(VERSION);
    let cfg = &model.config;
    w.u32(cfg.n_classes as u32);
    w.i64(cfg.alpha_hidden.map(|h| h as i64).unwrap_or(-1));
    w.u8(cfg.taste_enabled as u8);
    w.u32(cfg.taste_rank as u32);
    w.u32(cfg.rt_hidden as u32);
    w.u32(cfg.seasonal_rank as u32);
    w.u32(cfg.user_dim as u32);
    w.u32(cfg.item_dim as u32);
    w.u8(cfg.use_control_function as u8);
    for class in &model.classes {
        match &class.alpha {
            AlphaNet::Constant { raw } => {
                w.u8(0);
                w.f64(raw.item()?);
            }
            AlphaNet::Network(mlp) => {
                w.u8(1);
                w.mlp(mlp);
            }
        }
        w.u8(class.r_net.is_some() as u8);
        if let Some(r) = &class.r_net {
            w.mlp(r);
        }
        w.u8(class.t_net.is_some() as u8);
        if let Some(t) = &class.t_net {
            w.mlp(t);
        }
        w.f64(class.bias);
        w.f64(class.gamma.item()?);
    }
    w.tensor(&model.seasonal_w);
    w.tensor(&model.monthly_codes);
    w.u32(model.pi.len() as u32);
    for &p in &model.pi {
        w.f64(p);
    }
    w.f64(model.v0);
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DemandModel> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::data_msg(format!("{}: not a model file", path.display())));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::data_msg(format!("unsupported model version {version}")));
    }
    let n_classes = r.u32()? as usize;
    let alpha_hidden = match r.i64()? {
        -1 => None,
        h => Some(h as usize),
    };
    let taste_enabled = r.u8()? != 0;
    let taste_rank = r.u32()? as usize;
    let rt_hidden = r.u32()? as usize;
    let seasonal_rank = r.u32()? as usize;
    let user_dim = r.u32()? as usize;
    let item_dim = r.u32()? as usize;
    let use_control_function = r.u8()? != 0;
    let mut config = DemandConfig::new(user_dim, item_dim);
    config.n_classes = n_classes;
    config.alpha_hidden = alpha_hidden;
    config.taste_enabled = taste_enabled;
    config.taste_rank = taste_rank;
    config.rt_hidden = rt_hidden;
    config.seasonal_rank = seasonal_rank;
    config.use_control_function = use_control_function;

    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let alpha = match r.u8()? {
            0 => AlphaNet::Constant {
                raw: Tensor::scalar(r.f64()?),
            },
            1 => AlphaNet::Network(r.mlp()?),
            tag => return Err(Error::data_msg(format!("unknown alpha tag {tag}"))),
        };
        let r_net = if r.u8()? != 0 { Some(r.mlp()?) } else { None };
        let t_net = if r.u8()? != 0 { Some(r.mlp()?) } else { None };
        let bias = r.f64()?;
        let gamma = Tensor::scalar(r.f64()?);
        classes.push(ClassParams {
            alpha,
            r_net,
            t_net,
            bias,
            gamma,
        });
    }
    let seasonal_w = r.tensor()?;
    let monthly_codes = r.tensor()?;
    let n_pi = r.u32()? as usize;
    let mut pi = Vec::with_capacity(n_pi);
    for _ in 0..n_pi {
        pi.push(r.f64()?);
    }
    let v0 = r.f64()?;
    Ok(DemandModel {
        classes,
        seasonal_w,
        monthly_codes,
        pi,
        v0,
        config,
    })
}

/// Human-readable summary written next to the binary.
pub fn write_model_sidecar(path: &Path, model: &DemandModel, report: Option<&FitReport>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "format: demand model v{VERSION}")?;
    writeln!(w, "classes: {}", model.config.n_classes)?;
    writeln!(w, "taste_enabled: {}", model.config.taste_enabled)?;
    writeln!(w, "taste_rank: {}", model.config.taste_rank)?;
    writeln!(w, "user_dim: {}", model.config.user_dim)?;
    writeln!(w, "item_dim: {}", model.config.item_dim)?;
    writeln!(w, "control_function: {}", model.config.use_control_function)?;
    for (c, p) in model.pi.iter().enumerate() {
        writeln!(w, "pi_{c}: {p:.6}")?;
    }
    writeln!(w, "v0: {:.6}", model.v0)?;
    if let Some(rep) = report {
        for (c, a) in rep.alpha_bar.iter().enumerate() {
            writeln!(w, "alpha_bar_{c}: {a:.6}")?;
        }
        writeln!(w, "train_nll: {:.6}", rep.train_nll)?;
        writeln!(w, "val_nll: {:.6}", rep.val_nll)?;
        writeln!(w, "mcfadden_r2: {:.6}", rep.mcfadden_r2)?;
        writeln!(w, "epochs_run: {}", rep.epochs_run)?;
        writeln!(w, "converged: {}", rep.converged)?;
        writeln!(w, "class_collapse: {}", rep.class_collapse)?;
        writeln!(w, "train_events: {}", rep.n_train_events)?;
        writeln!(w, "val_events: {}", rep.n_val_events)?;
    }
    w.flush()?;
    Ok(())
}
