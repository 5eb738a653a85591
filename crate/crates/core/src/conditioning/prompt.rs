use rand::Rng;

use super::labels::{AttributeLabels, AGE_BINS, GENDER_CLASSES, HEAD_SIZES, SKIN_TONES};
use crate::error::{dim_err, Result};
use crate::nn::{Module, Named, NamedMut};
use crate::tensor::{Tape, Tensor, Var};

/// One learned row per label value for each attribute; a label triple maps
/// to three `d_ctx` tokens.
#[derive(Debug, Clone)]
pub struct PromptTable {
    pub gender: Tensor<f32>,
    pub age: Tensor<f32>,
    pub tone: Tensor<f32>,
}

impl PromptTable {
    pub fn new<R: Rng + ?Sized>(d_ctx: usize, rng: &mut R) -> Self {
        PromptTable {
            gender: Tensor::randn(vec![GENDER_CLASSES, d_ctx], 0.02, rng).with_grad(),
            age: Tensor::randn(vec![AGE_BINS, d_ctx], 0.02, rng).with_grad(),
            tone: Tensor::randn(vec![SKIN_TONES, d_ctx], 0.02, rng).with_grad(),
        }
    }

    pub fn d_ctx(&self) -> usize {
        self.gender.shape()[1]
    }

    /// `[B, 3, d_ctx]` tokens for a batch of labels.
    pub fn encode(&self, tape: &mut Tape<f32>, labels: &[AttributeLabels]) -> Result<Var> {
        for l in labels {
            AttributeLabels::from_array(l.as_array())?;
        }
        let d = self.d_ctx();
        let g = tape.param(&self.gender);
        let a = tape.param(&self.age);
        let t = tape.param(&self.tone);
        let gi: Vec<usize> = labels.iter().map(|l| l.gender).collect();
        let ai: Vec<usize> = labels.iter().map(|l| l.age_bin).collect();
        let ti: Vec<usize> = labels.iter().map(|l| l.skin_tone).collect();
        let rows = [tape.gather(g, &gi)?, tape.gather(a, &ai)?, tape.gather(t, &ti)?];
        let rows: Vec<Var> = rows
            .iter()
            .map(|&r| tape.reshape(r, &[labels.len(), 1, d]))
            .collect::<Result<_>>()?;
        tape.concat(&rows, 1)
    }
}

/// `[3, d_ctx]` tokens for one label triple.
pub fn encode_prompt(table: &PromptTable, labels: &AttributeLabels) -> Result<Tensor<f32>> {
    let mut tape = Tape::no_grad();
    let v = table.encode(&mut tape, std::slice::from_ref(labels))?;
    tape.tensor(v).reshape(vec![3, table.d_ctx()])
}

/// Fixed tokens without a table: token `h` is the one-hot of label `h`,
/// zero-padded to `d_ctx`. Shape `[B, 3, d_ctx]`.
pub fn one_hot_tokens(labels: &[AttributeLabels], d_ctx: usize) -> Result<Tensor<f32>> {
    let widest = HEAD_SIZES.iter().copied().max().unwrap_or(0);
    if d_ctx < widest {
        return dim_err(format!("d_ctx {d_ctx} cannot hold {widest} one-hot classes"));
    }
    let mut data = vec![0f32; labels.len() * 3 * d_ctx];
    for (i, l) in labels.iter().enumerate() {
        for (h, &v) in AttributeLabels::from_array(l.as_array())?.as_array().iter().enumerate() {
            data[(i * 3 + h) * d_ctx + v] = 1.0;
        }
    }
    Tensor::new(vec![labels.len(), 3, d_ctx], data)
}

impl Module<f32> for PromptTable {
    fn params(&self) -> Named<'_, f32> {
        vec![
            ("gender".into(), &self.gender),
            ("age".into(), &self.age),
            ("tone".into(), &self.tone),
        ]
    }

    fn params_mut(&mut self) -> NamedMut<'_, f32> {
        vec![
            ("gender".into(), &mut self.gender),
            ("age".into(), &mut self.age),
            ("tone".into(), &mut self.tone),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn lookup_shape_and_determinism() {
        let mut r = rng::seeded(1);
        let table = PromptTable::new(16, &mut r);
        let l = AttributeLabels::new(1, 4, 7).unwrap();
        let e = encode_prompt(&table, &l).unwrap();
        assert_eq!(e.shape(), &[3, 16]);
        assert_eq!(e, encode_prompt(&table, &l).unwrap());
        assert_eq!(&e.data()[32..], &table.tone.data()[7 * 16..8 * 16]);
        let rows: Vec<&[f32]> = table.tone.data().chunks(16).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    #[test]
    fn gradient_touches_only_selected_rows() {
        let mut r = rng::seeded(2);
        let mut table = PromptTable::new(4, &mut r);
        let labels = [AttributeLabels::new(0, 2, 5).unwrap()];
        let mut tape = Tape::new();
        let e = table.encode(&mut tape, &labels).unwrap();
        let sq = tape.square(e);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        for (_, p) in table.params_mut() {
            g.accumulate(p).unwrap();
        }
        let touched = |t: &Tensor<f32>| -> Vec<usize> {
            t.grad()
                .unwrap()
                .chunks(4)
                .enumerate()
                .filter(|(_, c)| c.iter().any(|&v| v != 0.0))
                .map(|(i, _)| i)
                .collect()
        };
        assert_eq!(touched(&table.gender), vec![0]);
        assert_eq!(touched(&table.age), vec![2]);
        assert_eq!(touched(&table.tone), vec![5]);
    }

    #[test]
    fn one_hot_layout() {
        let l = [AttributeLabels::new(1, 8, 18).unwrap()];
        let t = one_hot_tokens(&l, 20).unwrap();
        assert_eq!(t.shape(), &[1, 3, 20]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[20 + 8], 1.0);
        assert_eq!(t.data()[40 + 18], 1.0);
        assert_eq!(t.data().iter().sum::<f32>(), 3.0);
        assert!(one_hot_tokens(&l, 10).is_err());
    }
}
