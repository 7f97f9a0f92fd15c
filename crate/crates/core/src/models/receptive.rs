use serde::{Deserialize, Serialize};

use super::DiscriminatorSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub receptive_field: usize,
    /// Input-pixel distance between neighbouring units of this layer.
    pub jump: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveFieldTable {
    pub layers: Vec<ReceptiveField>,
}

impl ReceptiveFieldTable {
    /// Builds the table for a chain of `(kernel, stride)` layers.
    pub fn from_layers(layers: &[(usize, usize)]) -> Self {
        let mut rf = 1;
        let mut jump = 1;
        let layers = layers
            .iter()
            .map(|&(k, s)| {
                rf += (k - 1) * jump;
                jump *= s;
                ReceptiveField {
                    receptive_field: rf,
                    jump,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.receptive_field).collect()
    }
}

pub fn receptive_fields(spec: &DiscriminatorSpec) -> ReceptiveFieldTable {
    let layers: Vec<_> = spec.layers.iter().map(|l| (l.kernel, l.stride)).collect();
    ReceptiveFieldTable::from_layers(&layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Width of the input span that reaches one unit of each layer, found by
    /// pushing index intervals through unpadded 1-D convolutions.
    fn traced(layers: &[(usize, usize)]) -> Vec<usize> {
        let n = 512;
        // sources[i] = set of input positions feeding unit i, as a bitmap
        let mut sources: Vec<Vec<bool>> = (0..n)
            .map(|i| {
                let mut v = vec![false; n];
                v[i] = true;
                v
            })
            .collect();
        let mut out = Vec::new();
        for &(k, s) in layers {
            let len = (sources.len() - k) / s + 1;
            sources = (0..len)
                .map(|o| {
                    let mut v = vec![false; n];
                    for t in 0..k {
                        for (dst, &src) in v.iter_mut().zip(&sources[o * s + t]) {
                            *dst |= src;
                        }
                    }
                    v
                })
                .collect();
            let mid = &sources[sources.len() / 2];
            out.push(mid.iter().filter(|&&b| b).count());
        }
        out
    }

    #[test]
    fn default_discriminator() {
        let t = receptive_fields(&DiscriminatorSpec::pair());
        assert_eq!(t.sizes(), vec![4, 10, 22, 46, 70]);
        assert!(t.sizes().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(t.layers.last().unwrap().jump, 8);
    }

    #[test]
    fn identity_layer() {
        assert_eq!(ReceptiveFieldTable::from_layers(&[(1, 1)]).sizes(), vec![1]);
    }

    #[test]
    fn matches_impulse_tracing() {
        for layers in [
            vec![(4, 2), (4, 2), (4, 2), (4, 2), (4, 1)],
            vec![(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)],
            vec![(3, 1), (5, 3), (2, 2)],
        ] {
            assert_eq!(ReceptiveFieldTable::from_layers(&layers).sizes(), traced(&layers));
        }
    }
}
