//! Python bindings: checkpoint inference, metrics, stub embeddings and CTXE
//! embedding files.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use swintext::checkpoint::Checkpoint;
use swintext::config::{parse_config, RunConfig};
use swintext::image::resize_bilinear;
use swintext::metrics::{dice_iou as core_dice_iou, THRESHOLD};
use swintext::model::SwinTextUNet;
use swintext::params::ParamStore;
use swintext::text::{stub_encode, EmbeddingTable};
use swintext::{Error, Tape, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Resolution { .. } => PyKeyError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Deterministic stand-in text embedding (unit length).
#[pyfunction]
#[pyo3(signature = (prompt, dim, seed = 0))]
fn stub_embedding(prompt: &str, dim: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(stub_encode(prompt, dim, seed).map_err(to_py)?.pooled)
}

/// Reads a CTXE file into `(dim, [(prompt, vector), ...])`.
#[pyfunction]
fn read_ctxe(path: &str) -> PyResult<(usize, Vec<(String, Vec<f32>)>)> {
    let t = EmbeddingTable::read(Path::new(path)).map_err(to_py)?;
    Ok((t.dim(), t.records().to_vec()))
}

/// Writes `(prompt, vector)` records as a CTXE file.
#[pyfunction]
fn write_ctxe(path: &str, dim: usize, records: Vec<(String, Vec<f32>)>) -> PyResult<()> {
    let mut t = EmbeddingTable::new(dim);
    for (p, v) in records {
        t.insert(&p, v).map_err(to_py)?;
    }
    t.write(Path::new(path)).map_err(to_py)
}

/// `(dice, iou)` of two equally long binary masks (nonzero = foreground).
#[pyfunction]
fn dice_iou(pred: Vec<u8>, gt: Vec<u8>) -> PyResult<(f64, f64)> {
    let p: Vec<bool> = pred.iter().map(|&v| v != 0).collect();
    let g: Vec<bool> = gt.iter().map(|&v| v != 0).collect();
    core_dice_iou(&p, &g).map_err(to_py)
}

/// A trained model loaded from a STUN checkpoint.
#[pyclass(module = "swintext")]
pub struct Segmenter {
    cfg: RunConfig,
    model: SwinTextUNet,
    params: ParamStore<f32>,
}

impl Segmenter {
    pub fn load(path: &Path) -> swintext::Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg = parse_config(&ck.config)?;
        let (model, mut params) = SwinTextUNet::new::<f32>(&cfg.model, 0)?;
        ck.restore(&mut params)?;
        Ok(Self { cfg, model, params })
    }

    /// Probabilities at the input resolution for a row-major `u8` image.
    pub fn probabilities(&self, pixels: &[u8], width: usize, height: usize, text: Option<&[f64]>) -> swintext::Result<Vec<f32>> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        let m = &self.cfg.model;
        let s = m.image_size;
        let unit: Vec<f32> = pixels.iter().map(|&v| v as f32 / 255.0).collect();
        let plane = resize_bilinear(&unit, height, width, s, s);
        let data: Vec<f32> = (0..m.in_channels).flat_map(|_| plane.iter().copied()).collect();
        let mut t = Tape::inference();
        let x = t.constant(Tensor::new(vec![1, m.in_channels, s, s], data)?);
        let txt = match (m.use_text, text) {
            (false, _) => None,
            (true, Some(v)) => {
                let v: Vec<f32> = v.iter().map(|&x| x as f32).collect();
                Some(t.constant(Tensor::new(vec![1, 1, v.len()], v)?))
            }
            (true, None) => return Err(Error::Usage("this model needs a text embedding".into())),
        };
        let out = self.model.forward(&mut t, &self.params, x, txt)?;
        Ok(resize_bilinear(t.value(out.probs).data(), s, s, height, width))
    }
}

#[pymethods]
impl Segmenter {
    #[new]
    fn py_new(path: &str) -> PyResult<Self> {
        Self::load(Path::new(path)).map_err(to_py)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.cfg.model.image_size
    }

    #[getter]
    fn text_dim(&self) -> usize {
        self.cfg.model.text_dim
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.cfg.variant_name()
    }

    /// Foreground probabilities, row-major, same size as the input.
    #[pyo3(signature = (pixels, width, height, embedding = None))]
    fn predict_proba(&self, pixels: Vec<u8>, width: usize, height: usize, embedding: Option<Vec<f64>>) -> PyResult<Vec<f32>> {
        self.probabilities(&pixels, width, height, embedding.as_deref()).map_err(to_py)
    }

    /// Binary mask (0/1) thresholded at 0.5.
    #[pyo3(signature = (pixels, width, height, embedding = None))]
    fn predict(&self, pixels: Vec<u8>, width: usize, height: usize, embedding: Option<Vec<f64>>) -> PyResult<Vec<u8>> {
        let p = self.predict_proba(pixels, width, height, embedding)?;
        Ok(p.iter().map(|&v| (v as f64 >= THRESHOLD) as u8).collect())
    }
}

#[pymodule]
#[pyo3(name = "swintext")]
pub fn swintext_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(stub_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(read_ctxe, m)?)?;
    m.add_function(wrap_pyfunction!(write_ctxe, m)?)?;
    m.add_function(wrap_pyfunction!(dice_iou, m)?)?;
    m.add_class::<Segmenter>()?;
    Ok(())
}
