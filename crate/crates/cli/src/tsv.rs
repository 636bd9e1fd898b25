use std::fmt::Write as _;

use seqlab::corpus::Sentence;
use seqlab::train::Model;

/// One exported token: surface form, whether it mapped to the OOV word,
/// and its gate vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub token: String,
    pub oov: bool,
    pub mean_z: f64,
    pub z: Vec<f32>,
}

pub fn gate_rows(model: &Model<f32>, sentences: &[Sentence]) -> seqlab::Result<Vec<GateRow>> {
    let oov = model.vocab.oov_word_id();
    let mut rows = Vec::new();
    for s in sentences {
        for (t, z) in model.gates(s)?.into_iter().enumerate() {
            let mean_z = z.iter().map(|&v| f64::from(v)).sum::<f64>() / z.len() as f64;
            rows.push(GateRow {
                token: s.surface[t].clone(),
                oov: s.word_ids[t] == oov,
                mean_z,
                z,
            });
        }
    }
    Ok(rows)
}

pub(crate) fn render_gates(rows: &[GateRow], dim: usize) -> String {
    let mut out = String::from("token\toov\tmean_z");
    for k in 0..dim {
        let _ = write!(out, "\tz{k}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.token, u8::from(r.oov), r.mean_z);
        for v in &r.z {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

pub(crate) fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}
