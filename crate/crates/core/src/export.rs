//! CSV writers for analysis outputs.
//!
//! Floats use Rust's shortest round-trip formatting ('.' decimal point).
//! Undefined cells (a source after its target step, a NaN) are left empty.

use std::io::Write;

use nalgebra::DMatrix;

use crate::decomposition::{KappaTensor, WordContributions};
use crate::error::Result;
use crate::vocab::{Vocab, SPACE_GLYPH};

/// What a κ heatmap cell shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapView {
    /// One logit coordinate (an output symbol index).
    Logit(usize),
    /// `||kappa_s^t||_2`.
    Norm,
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub(crate) fn glyph(vocab: &Vocab, token: usize) -> String {
    match vocab.symbol(token) {
        Ok(c) if vocab.is_text() && c == ' ' => SPACE_GLYPH.to_string(),
        Ok(c) => c.to_string(),
        Err(_) => "?".into(),
    }
}

/// Rows: the readout bias, then one row per source (`0` is the initial
/// state); columns: target steps `0..=T`.
pub fn write_kappa_heatmap<W: Write>(out: W, kappa: &KappaTensor, view: HeatmapView) -> Result<()> {
    if let HeatmapView::Logit(k) = view {
        if k >= kappa.output_dim() {
            return Err(crate::IsanError::Index {
                index: k,
                len: kappa.output_dim(),
            });
        }
    }
    let steps = kappa.len() + 1;
    let value = |v: &[f64]| match view {
        HeatmapView::Logit(k) => v[k],
        HeatmapView::Norm => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["source".to_string(), "symbol".to_string()];
    header.extend((0..steps).map(|t| t.to_string()));
    w.write_record(&header)?;

    let bias = value(kappa.readout_bias().as_slice());
    let mut row = vec!["bias".to_string(), String::new()];
    row.extend((0..steps).map(|_| cell(bias)));
    w.write_record(&row)?;
    for s in 0..steps {
        let symbol = match kappa.source_token(s) {
            None => "h0".to_string(),
            Some(x) => glyph(kappa.vocab(), x),
        };
        let mut row = vec![s.to_string(), symbol];
        for t in 0..steps {
            row.push(if s <= t { cell(value(kappa.get(s, t)?)) } else { String::new() });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Rows: words (leading space shown as `_`); columns: target steps.
pub fn write_word_heatmap<W: Write>(out: W, words: &WordContributions) -> Result<()> {
    let steps = words.norms.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["word".to_string(), "text".to_string()];
    header.extend((0..steps).map(|t| t.to_string()));
    w.write_record(&header)?;
    for (i, (text, norms)) in words.words.iter().zip(&words.norms).enumerate() {
        let mut row = vec![i.to_string(), text.replace(' ', &SPACE_GLYPH.to_string())];
        row.extend(norms.iter().map(|&v| cell(v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A header plus one `(key, value)` row per entry.
pub fn write_pairs<W: Write, K: ToString>(out: W, header: [&str; 2], rows: impl IntoIterator<Item = (K, f64)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for (k, v) in rows {
        w.write_record([k.to_string(), cell(v)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Any table of labelled rows.
pub fn write_table<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A matrix with optional row and column labels (`""` corner cell).
pub fn write_matrix<W: Write>(out: W, m: &DMatrix<f64>, rows: Option<&[String]>, cols: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(cols) = cols {
        let mut header = Vec::with_capacity(cols.len() + 1);
        if rows.is_some() {
            header.push(String::new());
        }
        header.extend(cols.iter().cloned());
        w.write_record(&header)?;
    }
    for i in 0..m.nrows() {
        let mut row = Vec::with_capacity(m.ncols() + 1);
        if let Some(labels) = rows {
            row.push(labels.get(i).cloned().unwrap_or_default());
        }
        row.extend(m.row(i).iter().map(|&v| cell(v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Symbol labels of a vocabulary, with the space shown as `_`.
pub fn symbol_labels(vocab: &Vocab) -> Vec<String> {
    (0..vocab.len()).map(|x| glyph(vocab, x)).collect()
}
