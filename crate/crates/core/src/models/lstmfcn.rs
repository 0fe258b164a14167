use autodiff::nn::{BatchNorm1d, Conv1d, Dense, Dropout, Lstm, ParamStore, Session};
use autodiff::{Padding, Var};
use rand_chacha::ChaCha8Rng;

use super::{LstmFcnConfig, Network, Outputs};
use crate::error::{argument, Result};

/// Fully convolutional stream (conv/BN/ReLU blocks, global average pool) in
/// parallel with an LSTM over the dimension-shuffled series, concatenated
/// into the classifier.
///
/// The shuffled view of an `(N, C, L)` batch is `C` steps of `L`-dimensional
/// vectors, which is already the channels-first layout, so the LSTM reads
/// the batch as is.
pub struct LstmFcn {
    convs: Vec<(Conv1d, BatchNorm1d)>,
    lstm: Lstm,
    dropout: Dropout,
    head: Dense,
}

impl LstmFcn {
    pub fn new(
        cfg: &LstmFcnConfig,
        in_channels: usize,
        series_length: usize,
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.conv_filters.len() != 3 || cfg.conv_kernels.len() != 3 {
            return argument("the FCN stream has exactly three convolution blocks");
        }
        if in_channels == 0 || series_length == 0 || num_classes == 0 || cfg.lstm_hidden == 0 || cfg.conv_filters.contains(&0) {
            return argument("channel, length, class and width settings must be positive");
        }
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for (i, (&f, &k)) in cfg.conv_filters.iter().zip(&cfg.conv_kernels).enumerate() {
            let conv = Conv1d::new(store, &format!("fcn{i}.conv"), c_in, f, k, 1, Padding::Same, rng);
            let bn = BatchNorm1d::new(store, &format!("fcn{i}.bn"), f);
            convs.push((conv, bn));
            c_in = f;
        }
        let lstm = Lstm::new(store, "lstm", series_length, cfg.lstm_hidden, rng);
        let dropout = Dropout::new(cfg.dropout_p)?;
        let head = Dense::new(store, "head", c_in + cfg.lstm_hidden, num_classes, rng);
        Ok(Self { convs, lstm, dropout, head })
    }
}

impl Network for LstmFcn {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Outputs> {
        let mut f = x;
        for (conv, bn) in &self.convs {
            f = conv.forward(s, f)?;
            f = bn.forward(s, f)?;
            f = s.graph.relu(f);
        }
        let fcn = s.graph.global_avg_pool1d(f)?;
        let h = self.lstm.forward(s, x)?;
        let h = self.dropout.forward(s, h)?;
        let joined = s.graph.concat(&[fcn, h])?;
        let logits = self.head.forward(s, joined)?;
        Ok(Outputs { logits, embedding: None, branches: Vec::new(), stem: None })
    }
}
