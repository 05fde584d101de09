//! Hand-built models shared by unit tests.

use crate::lm::{LanguageModel, ModelConfig};
use crate::nn::Tensor;
use crate::prompt::{HardPrompt, SoftPrompt};
use crate::tasks::{Example, Split, TaskDataset};

pub const A: usize = 1;
pub const B: usize = 2;
pub const V0: usize = 3;
pub const V1: usize = 4;
pub const H: usize = 5;

/// One block, d = 2, uniform attention, identity value/output maps, no MLP.
///
/// Each row `(a, b)` enters attention as roughly `±(1, −1)` according to the
/// sign of `a − b`; the last position predicts class 1 exactly when its own
/// row plus the attention average leans toward the first coordinate.
pub fn majority_model() -> LanguageModel<f64> {
    let config = ModelConfig {
        vocab_size: 8,
        embed_dim: 2,
        num_layers: 1,
        num_heads: 1,
        mlp_hidden: 1,
        max_seq_len: 8,
        seed: 0,
    };
    let mut m = LanguageModel::zeros(config).unwrap();
    let rows: [[f64; 2]; 8] = [
        [1.0, 0.0],
        [0.1, 0.0],
        [0.0, 0.1],
        [0.3, 0.2],
        [0.2, 0.3],
        [0.0, 1.0],
        [0.5, 0.1],
        [0.1, 0.5],
    ];
    m.embedding = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let b = &mut m.blocks[0];
    let mut qkv = vec![0.0; 2 * 6];
    qkv[4] = 1.0;
    qkv[6 + 5] = 1.0;
    b.attn_qkv = Tensor::matrix(2, 6, qkv).unwrap();
    b.attn_out = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut head = vec![0.0; 2 * 8];
    head[V1] = 1.0;
    head[8 + V0] = 1.0;
    m.head = Tensor::matrix(2, 8, head).unwrap();
    m.frozen()
}

/// Soft row `(1, 0)`; the model then predicts class 1 for every input.
pub fn majority_soft() -> SoftPrompt<f64> {
    SoftPrompt::new(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap()
}

/// Token `H = (0, 1)`; the model then predicts the input token's own lean.
pub fn majority_hard() -> HardPrompt {
    HardPrompt::new(vec![H])
}

/// Soft prompt right on 6 of 8, hard prompt right on 4 of 8.
pub fn majority_dataset() -> TaskDataset {
    let ex = |w: usize, label: usize| Example {
        input: vec![w],
        label,
    };
    TaskDataset {
        examples: vec![
            ex(A, 1),
            ex(B, 1),
            ex(B, 0),
            ex(B, 1),
            ex(A, 1),
            ex(B, 1),
            ex(B, 0),
            ex(B, 1),
        ],
        verbalizer: vec![V0, V1],
        split: Split::Eval,
    }
}
