//! Model file format: an 8-byte magic, a version, a JSON architecture
//! header, then raw little-endian f64 weight blobs. Weights round-trip
//! bit-exactly, so a reloaded model is the model that was saved.

use super::{spec_output_shape, Layer, LayerSpec, Model, Preprocess};
use crate::error::NetworkError;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"AOAMODEL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    label: String,
    input_shape: Vec<usize>,
    class_count: usize,
    preprocess: Preprocess,
    layers: Vec<LayerSpec>,
    /// Element count of each weight tensor, in file order (w then b per
    /// trainable layer). Lets a loader detect truncation before parsing.
    weight_counts: Vec<usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> NetworkError {
    NetworkError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(origin: &str, reason: impl Into<String>) -> NetworkError {
    NetworkError::Malformed {
        path: origin.to_string(),
        reason: reason.into(),
    }
}

/// Serialize a model to the on-disk byte format without touching the
/// filesystem (the demo embeds model bytes directly in the binary).
pub fn encode_model(model: &Model) -> Result<Vec<u8>, NetworkError> {
    let mut weights: Vec<&Tensor> = Vec::new();
    for layer in model.layers() {
        if let Layer::Dense { w, b } | Layer::Conv2d { k: w, b, .. } = layer {
            weights.push(w);
            weights.push(b);
        }
    }
    let header = Header {
        label: model.label.clone(),
        input_shape: model.input_shape.clone(),
        class_count: model.class_count,
        preprocess: model.preprocess.clone(),
        layers: model.specs(),
        weight_counts: weights.iter().map(|t| t.data().len()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| malformed("encode", format!("header serialization: {e}")))?;

    let mut out = Vec::with_capacity(
        16 + header_bytes.len() + 8 * weights.iter().map(|t| t.data().len()).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in weights {
        for &v in t.data() {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), NetworkError> {
    let out = encode_model(model)?;
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&out).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Parse a model from bytes in the on-disk format. `origin` names the
/// source in error messages (a path for files, a label for embedded data).
pub fn decode_model(bytes: &[u8], origin: &str) -> Result<Model, NetworkError> {
    if bytes.len() < 16 {
        return Err(malformed(origin, "shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(NetworkError::BadMagic {
            path: origin.to_string(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(NetworkError::VersionMismatch {
            path: origin.to_string(),
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let blob_start = 16usize.checked_add(header_len).unwrap_or(usize::MAX);
    if bytes.len() < blob_start {
        return Err(malformed(origin, "header extends past end of file"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..blob_start])
        .map_err(|e| malformed(origin, format!("header: {e}")))?;

    let expected: usize = header.weight_counts.iter().sum();
    let blob = &bytes[blob_start..];
    if blob.len() != 8 * expected {
        return Err(malformed(
            origin,
            format!(
                "weight blob holds {} bytes, header promises {}",
                blob.len(),
                8 * expected
            ),
        ));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real);
    let mut take = |shape: &[usize]| -> Result<Tensor, NetworkError> {
        let n: usize = shape.iter().product();
        let data: Vec<Real> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(malformed(origin, "weight blob ended mid-tensor"));
        }
        Ok(Tensor::new(shape.to_vec(), data)?)
    };

    // Rebuild layers, sizing each weight tensor from the running shape.
    let mut shape = header.input_shape.clone();
    let mut counts = header.weight_counts.iter();
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, spec) in header.layers.iter().enumerate() {
        let out_shape = spec_output_shape(spec, &shape, i)?;
        let layer = match *spec {
            LayerSpec::Dense { units } => {
                let (w, b) = (take(&[units, shape[0]])?, take(&[units])?);
                check_counts(origin, &mut counts, &[&w, &b])?;
                Layer::Dense { w, b }
            }
            LayerSpec::Conv2d { channels, kernel, stride, pad } => {
                let k = take(&[channels, shape[0], kernel, kernel])?;
                let b = take(&[channels])?;
                check_counts(origin, &mut counts, &[&k, &b])?;
                Layer::Conv2d { k, b, stride, pad }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { size, stride } => Layer::MaxPool { size, stride },
            LayerSpec::AvgPool { size, stride } => Layer::AvgPool { size, stride },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Softmax => Layer::Softmax,
        };
        layers.push(layer);
        shape = out_shape;
    }
    if counts.next().is_some() || values.next().is_some() {
        return Err(malformed(origin, "trailing weight data after last layer"));
    }
    Model::assemble(
        &header.label,
        &header.input_shape,
        header.class_count,
        header.preprocess,
        layers,
    )
}

pub fn load_model(path: &Path) -> Result<Model, NetworkError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_model(&bytes, &path.display().to_string())
}

/// Header weight counts must match the shapes implied by the architecture;
/// a mismatch means the file was edited or mis-written.
fn check_counts<'a>(
    origin: &str,
    counts: &mut impl Iterator<Item = &'a usize>,
    tensors: &[&Tensor],
) -> Result<(), NetworkError> {
    for t in tensors {
        match counts.next() {
            Some(&n) if n == t.data().len() => {}
            Some(&n) => {
                return Err(malformed(
                    origin,
                    format!("weight count {n} disagrees with shape {:?}", t.shape()),
                ))
            }
            None => return Err(malformed(origin, "header lists too few weight tensors")),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerSpec;
    use crate::tape::Tape;

    fn sample_model() -> Model {
        let specs = vec![
            LayerSpec::Conv2d { channels: 3, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Softmax,
        ];
        Model::from_specs("rt", &[1, 8, 8], 4, Preprocess::centered(1), &specs, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.aoamodel");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.label, model.label);
        assert_eq!(loaded.input_shape, model.input_shape);
        assert_eq!(loaded.preprocess, model.preprocess);
        for (a, b) in model.layers().iter().zip(loaded.layers()) {
            match (a, b) {
                (Layer::Dense { w: w1, b: b1 }, Layer::Dense { w: w2, b: b2 })
                | (Layer::Conv2d { k: w1, b: b1, .. }, Layer::Conv2d { k: w2, b: b2, .. }) => {
                    assert_eq!(w1, w2);
                    assert_eq!(b1, b2);
                }
                _ => assert_eq!(a.spec(), b.spec()),
            }
        }
        let mut rng = crate::rng::Rng::seed(0);
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.uniform(0.0, 255.0)).collect())
            .unwrap();
        assert_eq!(
            model.forward(&x).unwrap().probs,
            loaded.forward(&x).unwrap().probs
        );
        // Taped forward agrees too.
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let fwd = loaded.forward_taped(&mut tape, leaf).unwrap();
        assert_eq!(tape.value(fwd.probs), &model.forward(&x).unwrap().probs);
    }

    #[test]
    fn byte_level_round_trip_matches_the_file_path() {
        let model = sample_model();
        let bytes = encode_model(&model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.aoamodel");
        save_model(&model, &path).unwrap();
        assert_eq!(bytes, fs::read(&path).unwrap());
        let decoded = decode_model(&bytes, "embedded").unwrap();
        assert_eq!(decoded.label, model.label);
        let err = decode_model(&bytes[..bytes.len() - 1], "embedded").unwrap_err();
        assert!(err.to_string().contains("embedded"));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.aoamodel");
        save_model(&model, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let bad_magic = dir.path().join("magic");
        fs::write(&bad_magic, b"NOTMODEL".iter().chain(&good[8..]).copied().collect::<Vec<_>>())
            .unwrap();
        assert!(matches!(
            load_model(&bad_magic),
            Err(NetworkError::BadMagic { .. })
        ));

        let mut v2 = good.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        let bad_version = dir.path().join("version");
        fs::write(&bad_version, &v2).unwrap();
        assert!(matches!(
            load_model(&bad_version),
            Err(NetworkError::VersionMismatch { found: 2, .. })
        ));

        let cut = dir.path().join("cut");
        fs::write(&cut, &good[..good.len() - 9]).unwrap();
        assert!(matches!(
            load_model(&cut),
            Err(NetworkError::Malformed { .. })
        ));

        assert!(matches!(
            load_model(&dir.path().join("absent")),
            Err(NetworkError::Io { .. })
        ));
    }

    #[test]
    fn rejects_garbage_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(b"{oops");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(NetworkError::Malformed { .. })));
    }
}
