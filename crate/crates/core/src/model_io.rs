//! JSON model files. Every file is an object whose `type` field names the
//! model; matrices are arrays of rows.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::count_models::PolyaModel;
use crate::descriptors::PcaModel;
use crate::encoder::WhitenStats;
use crate::error::{Error, Result};
use crate::eval::LinearModel;
use crate::gmm::GaussianMixture;
use crate::latent_mog::LatentMogModel;
use crate::topic_models::{LdaModel, PlsaModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelFile {
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
    Pca(PcaModel),
    Polya {
        alpha: Vec<f64>,
    },
    Plsa {
        topic_word: Vec<Vec<f64>>,
        doc_topic_init: Vec<f64>,
    },
    Lda {
        alpha: Vec<f64>,
        eta: Vec<Vec<f64>>,
    },
    Latmog {
        alpha: Vec<f64>,
        m: Vec<Vec<f64>>,
        beta: Vec<Vec<f64>>,
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
    },
    Whitening {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Svm {
        classes: Vec<String>,
        c: f64,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
}

pub fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("ragged matrix in model file"));
    }
    Ok(Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("checked shape"))
}

impl ModelFile {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFile::Gmm { .. } => "gmm",
            ModelFile::Pca(_) => "pca",
            ModelFile::Polya { .. } => "polya",
            ModelFile::Plsa { .. } => "plsa",
            ModelFile::Lda { .. } => "lda",
            ModelFile::Latmog { .. } => "latmog",
            ModelFile::Whitening { .. } => "whitening",
            ModelFile::Svm { .. } => "svm",
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("model files serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        ModelFile::from_json(&fs::read_to_string(path)?)
    }

    fn wrong(&self, want: &str) -> Error {
        Error::invalid(format!("expected a {want} model, found {}", self.kind()))
    }

    pub fn gmm(&self) -> Result<GaussianMixture> {
        match self {
            ModelFile::Gmm {
                weights,
                means,
                variances,
            } => GaussianMixture::new(Array1::from(weights.clone()), matrix(means)?, matrix(variances)?),
            other => Err(other.wrong("gmm")),
        }
    }

    pub fn pca(&self) -> Result<PcaModel> {
        match self {
            ModelFile::Pca(p) => Ok(p.clone()),
            other => Err(other.wrong("pca")),
        }
    }

    pub fn polya(&self) -> Result<PolyaModel> {
        match self {
            ModelFile::Polya { alpha } => PolyaModel::new(Array1::from(alpha.clone())),
            other => Err(other.wrong("polya")),
        }
    }

    pub fn plsa(&self) -> Result<PlsaModel> {
        match self {
            ModelFile::Plsa {
                topic_word,
                doc_topic_init,
            } => PlsaModel::new(matrix(topic_word)?, Array1::from(doc_topic_init.clone())),
            other => Err(other.wrong("plsa")),
        }
    }

    pub fn lda(&self) -> Result<LdaModel> {
        match self {
            ModelFile::Lda { alpha, eta } => LdaModel::new(Array1::from(alpha.clone()), matrix(eta)?),
            other => Err(other.wrong("lda")),
        }
    }

    pub fn latmog(&self) -> Result<LatentMogModel> {
        match self {
            ModelFile::Latmog { alpha, m, beta, a, b } => LatentMogModel::new(
                Array1::from(alpha.clone()),
                matrix(m)?,
                matrix(beta)?,
                matrix(a)?,
                matrix(b)?,
            ),
            other => Err(other.wrong("latmog")),
        }
    }

    pub fn whitening(&self) -> Result<WhitenStats> {
        match self {
            ModelFile::Whitening { mean, std } => Ok(WhitenStats {
                mean: Array1::from(mean.clone()),
                std: Array1::from(std.clone()),
            }),
            other => Err(other.wrong("whitening")),
        }
    }

    /// The classifier and its class names.
    pub fn svm(&self) -> Result<(LinearModel, Vec<String>)> {
        match self {
            ModelFile::Svm {
                classes,
                c,
                weights,
                bias,
            } => {
                let weights = matrix(weights)?;
                if weights.nrows() != classes.len() || bias.len() != classes.len() {
                    return Err(Error::invalid("svm model has inconsistent class count"));
                }
                Ok((
                    LinearModel {
                        weights,
                        bias: Array1::from(bias.clone()),
                        c: *c,
                    },
                    classes.clone(),
                ))
            }
            other => Err(other.wrong("svm")),
        }
    }
}

impl From<&GaussianMixture> for ModelFile {
    fn from(g: &GaussianMixture) -> Self {
        ModelFile::Gmm {
            weights: g.weights.to_vec(),
            means: rows(&g.means),
            variances: rows(&g.variances),
        }
    }
}

impl From<&PcaModel> for ModelFile {
    fn from(p: &PcaModel) -> Self {
        ModelFile::Pca(p.clone())
    }
}

impl From<&PolyaModel> for ModelFile {
    fn from(p: &PolyaModel) -> Self {
        ModelFile::Polya { alpha: p.alpha.to_vec() }
    }
}

impl From<&PlsaModel> for ModelFile {
    fn from(p: &PlsaModel) -> Self {
        ModelFile::Plsa {
            topic_word: rows(&p.topic_word),
            doc_topic_init: p.doc_topic_init.to_vec(),
        }
    }
}

impl From<&LdaModel> for ModelFile {
    fn from(l: &LdaModel) -> Self {
        ModelFile::Lda {
            alpha: l.alpha.to_vec(),
            eta: rows(&l.eta),
        }
    }
}

impl From<&LatentMogModel> for ModelFile {
    fn from(l: &LatentMogModel) -> Self {
        ModelFile::Latmog {
            alpha: l.alpha.to_vec(),
            m: rows(&l.m),
            beta: rows(&l.beta),
            a: rows(&l.a),
            b: rows(&l.b),
        }
    }
}

impl From<&WhitenStats> for ModelFile {
    fn from(w: &WhitenStats) -> Self {
        ModelFile::Whitening {
            mean: w.mean.to_vec(),
            std: w.std.to_vec(),
        }
    }
}

impl ModelFile {
    pub fn from_svm(model: &LinearModel, classes: &[String]) -> Self {
        ModelFile::Svm {
            classes: classes.to_vec(),
            c: model.c,
            weights: rows(&model.weights),
            bias: model.bias.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn polya_schema() {
        let m = PolyaModel::new(array![0.5, 2.0]).unwrap();
        let json = ModelFile::from(&m).to_json();
        assert_eq!(json, "{\"type\":\"polya\",\"alpha\":[0.5,2.0]}\n");
        assert_eq!(ModelFile::from_json(&json).unwrap().polya().unwrap(), m);
    }

    #[test]
    fn latmog_round_trip_is_exact() {
        let m = LatentMogModel::new(
            array![0.1, 1.0 / 3.0],
            array![[1.0], [-2.5]],
            array![[0.7], [1e-6]],
            array![[2.0], [3.0]],
            array![[0.1], [std::f64::consts::PI]],
        )
        .unwrap();
        let back = ModelFile::from_json(&ModelFile::from(&m).to_json()).unwrap().latmog().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wrong_type_is_reported() {
        let f = ModelFile::from_json("{\"type\":\"polya\",\"alpha\":[1.0]}").unwrap();
        let err = f.lda().unwrap_err().to_string();
        assert!(err.contains("expected a lda model"), "{err}");
        assert!(ModelFile::from_json("{\"type\":\"nope\"}").is_err());
    }
}
