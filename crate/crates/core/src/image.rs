//! Precomputed image features and the trainable image mapping.
//!
//! Features come from an external image network and are read from disk; the
//! only trainable piece here is the dense map from the raw feature to the
//! joint dimension.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{dense, dense_backward, DenseGrad, DenseParams};
use crate::tensor::{read_u32, Tensor};

pub const DEFAULT_FEATURE_DIM: usize = 4096;
const BINARY_MAGIC: &[u8; 4] = b"QAFT";

/// Image id to feature vector; ids keep their insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageFeatureStore {
    dim: Option<usize>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    features: Vec<Vec<f64>>,
}

impl ImageFeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, feature: Vec<f64>) -> Result<()> {
        let id = id.into();
        if feature.is_empty() {
            return Err(Error::arg(format!("image `{id}` has an empty feature vector")));
        }
        match self.dim {
            Some(d) if d != feature.len() => {
                return Err(Error::dim("image feature length", &[feature.len()], &[d]));
            }
            _ => self.dim = Some(feature.len()),
        }
        if self.index.contains_key(&id) {
            return Err(Error::Duplicate(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.features.push(feature);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.features[i].as_slice())
    }

    pub fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Feature length shared by every record, `None` when empty.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(String::as_str).zip(self.features.iter().map(Vec::as_slice))
    }

    /// Parses the text format: one `image_id<TAB>v1,v2,...,vD` record per line.
    pub fn parse_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut store = ImageFeatureStore::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let (id, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected `image_id<TAB>values`".into(),
            })?;
            if id.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty image id".into(),
                });
            }
            let feature = values
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("invalid number `{v}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            store.insert(id, feature).map_err(|e| match e {
                Error::Dimension { .. } => Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                },
                other => other,
            })?;
        }
        Ok(store)
    }

    /// Like [`parse_text`](Self::parse_text) but also enforces the dimension.
    pub fn parse_text_with_dim<R: BufRead>(reader: R, dim: usize) -> Result<Self> {
        let store = Self::parse_text(reader)?;
        match store.dim {
            Some(d) if d != dim => Err(Error::dim("image feature length", &[d], &[dim])),
            _ => Ok(store),
        }
    }

    /// Writes the text format. Values use the shortest representation that
    /// parses back to the same bits.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        for (id, feat) in self.iter() {
            write!(w, "{id}\t")?;
            for (i, v) in feat.iter().enumerate() {
                if i > 0 {
                    w.write_all(b",")?;
                }
                write!(w, "{v:?}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Binary variant: magic, id count, length-prefixed UTF-8 ids, then one
    /// `[count x dim]` tensor block.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = self.dim.ok_or_else(|| Error::arg("cannot write an empty feature store"))?;
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        let data: Vec<f64> = self.features.iter().flatten().copied().collect();
        Tensor::matrix(self.len(), dim, data)?.write_to(w)
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::arg("not a binary feature file"));
        }
        let count = read_u32(r)? as usize;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|_| Error::arg("image id is not UTF-8"))?);
        }
        let block = Tensor::read_from(r)?;
        if block.rank() != 2 || block.rows() != count {
            return Err(Error::dim("feature block vs id table", block.shape(), &[count]));
        }
        let mut store = ImageFeatureStore::new();
        for (i, id) in ids.into_iter().enumerate() {
            store.insert(id, block.row(i).to_vec())?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        if is_binary_path(path) {
            self.write_binary(&mut w)?;
        } else {
            self.write_text(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

/// Loads a feature file; `.bin` files use the binary layout, anything else
/// the tab-separated text layout.
pub fn load_features(path: impl AsRef<Path>) -> Result<ImageFeatureStore> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let store = if is_binary_path(path) {
        ImageFeatureStore::read_binary(&mut BufReader::new(file))?
    } else {
        ImageFeatureStore::parse_text(BufReader::new(file))?
    };
    log::info!("loaded {} image feature records from {}", store.len(), path.display());
    Ok(store)
}

/// Maps a raw image feature to the joint space: `act(W f + b)`.
pub fn map_image(feature: &Tensor, params: &DenseParams) -> Result<Tensor> {
    dense(feature, params)
}

/// Gradients for the mapping parameters only; the stored feature is frozen,
/// so no input gradient is returned.
pub fn map_image_backward(
    feature: &Tensor,
    params: &DenseParams,
    output: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let DenseGrad { weights, bias, .. } = dense_backward(feature, params, output, upstream)?;
    Ok((weights, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::tensor::finite_difference_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_two_records() {
        let text = "a\t1,2,3\nb\t-0.5,1e-3,4\n";
        let store = ImageFeatureStore::parse_text(text.as_bytes()).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.dim(), Some(3));
        assert_eq!(store.get("b").unwrap(), &[-0.5, 1e-3, 4.0]);
        assert!(matches!(store.require("c"), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn short_record_is_a_dimension_error() {
        let full = vec!["0.5"; 4096].join(",");
        let short = vec!["0.5"; 4095].join(",");
        let text = format!("x\t{full}\ny\t{short}\n");
        let err = ImageFeatureStore::parse_text(text.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("4095"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("y\t{short}\n");
        let err = ImageFeatureStore::parse_text_with_dim(text.as_bytes(), DEFAULT_FEATURE_DIM).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn duplicate_id_is_reported() {
        let text = "a\t1\nb\t1\nc\t1\nd\t1\ne\t1\nf\t1\nc\t2\n";
        let err = ImageFeatureStore::parse_text(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Duplicate(ref id) if id == "c"), "{err:?}");
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(
            ImageFeatureStore::parse_text("a\t1,2\nbroken line\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            ImageFeatureStore::parse_text("a\t1,zz\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn text_and_binary_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ImageFeatureStore::new();
        for i in 0..5 {
            store
                .insert(format!("img{i}"), (0..7).map(|_| rng.gen_range(-1e3..1e3) / 3.0).collect())
                .unwrap();
        }
        let mut text = Vec::new();
        store.write_text(&mut text).unwrap();
        assert_eq!(ImageFeatureStore::parse_text(text.as_slice()).unwrap(), store);

        let mut bin = Vec::new();
        store.write_binary(&mut bin).unwrap();
        assert_eq!(ImageFeatureStore::read_binary(&mut bin.as_slice()).unwrap(), store);
    }

    #[test]
    fn map_image_examples() {
        let zero = DenseParams::new(Tensor::zeros(&[400, 4096]), Tensor::zeros(&[400]), Activation::Relu).unwrap();
        let out = map_image(&Tensor::vector(vec![1.0; 4096]), &zero).unwrap();
        assert_eq!(out.len(), 400);
        assert!(out.data().iter().all(|v| *v == 0.0));

        let id = DenseParams::new(Tensor::identity(4), Tensor::zeros(&[4]), Activation::Relu).unwrap();
        let out = map_image(&Tensor::vector(vec![1.0, -2.0, 3.0, 0.0]), &id).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 3.0, 0.0]);

        assert!(map_image(&Tensor::vector(vec![1.0; 5]), &id).is_err());
    }

    #[test]
    fn output_dim_independent_of_feature_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for feature_dim in [3, 17, 64] {
            let p = DenseParams::init(feature_dim, 6, Activation::Relu, &mut rng);
            assert_eq!(map_image(&Tensor::vector(vec![0.3; feature_dim]), &p).unwrap().len(), 6);
        }
    }

    #[test]
    fn map_image_weight_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b0: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let feat = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let probe: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let build = |w: &[f64]| {
                DenseParams::new(Tensor::matrix(3, 4, w.to_vec()).unwrap(), Tensor::vector(b0.clone()), Activation::Relu).unwrap()
            };
            let params = build(&w0);
            let out = map_image(&feat, &params).unwrap();
            let (dw, _) = map_image_backward(&feat, &params, &out, &Tensor::vector(probe.clone())).unwrap();
            let fd = finite_difference_gradient(
                |w| map_image(&feat, &build(w)).unwrap().data().iter().zip(&probe).map(|(a, b)| a * b).sum(),
                &w0,
                1e-5,
            )
            .unwrap();
            for (a, n) in dw.data().iter().zip(&fd) {
                assert!((a - n).abs() <= 1e-3 * a.abs().max(n.abs()).max(1e-6));
            }
        }
    }
}
