//! Finite-difference checks of the assembled model in double precision.

use cat_core::config::{Ablation, DecoderKind, ModelConfig};
use cat_core::encoder::EncoderInput;
use cat_core::model::{CatModel, ModelInput};
use cat_tensor::gradcheck::check_gradients;
use cat_tensor::ParamStore;

const VOCAB: usize = 12;
const DOC: &[usize] = &[2, 5, 6, 7, 8, 9];
const HIST: &[usize] = &[2, 10, 11, 4];
const LAST: &[usize] = &[2, 6, 7];
const DEC_IN: &[usize] = &[2, 8, 9];
const TARGET: &[usize] = &[8, 9, 3];

fn config(decoder: DecoderKind, ablation: Ablation) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        layers: 1,
        filter: 12,
        dropout: 0.0,
        decoder,
        ablation,
        label_smoothing: 0.1,
        max_doc_len: 16,
        max_utt_len: 8,
        ..ModelConfig::tiny()
    }
}

fn check(decoder: DecoderKind, ablation: Ablation) {
    let cfg = config(decoder, ablation);
    let (model, store) = CatModel::new(&cfg, VOCAB, 11).unwrap();
    let mut store: ParamStore<f64> = store.cast();
    let report = check_gradients(&mut store, 1e-5, None, |s| {
        let input = ModelInput {
            encoder: EncoderInput {
                document: DOC,
                history: HIST,
                last: LAST,
            },
            decoder_input: DEC_IN,
        };
        Ok(model.loss(s, input, TARGET, 0.0).map_err(|e| cat_tensor::TensorError::Contract(e.to_string()))?.0.total)
    })
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.max_rel_error() < 1e-5,
        "{decoder:?}/{ablation:?}: worst {} rel {:e} (|g| {:e})",
        worst.name,
        worst.rel_error,
        worst.analytic_norm
    );
    let numel: usize = report.params.iter().map(|p| p.numel).sum();
    assert!(report.kinks() * 100 < numel, "{} of {numel} differences crossed a kink", report.kinks());
    // the self-encoded history only feeds the gate and the unguided branch
    let uses_h_s = decoder == DecoderKind::Dd && matches!(ablation, Ablation::None | Ablation::WoG);
    for p in &report.params {
        let idle = p.name.starts_with("encoder.history_self") && !uses_h_s;
        assert_eq!(p.analytic_norm == 0.0, idle, "{}: gradient norm {:e}", p.name, p.analytic_norm);
    }
}

#[test]
fn deliberation_decoder_gradients() {
    check(DecoderKind::Dd, Ablation::None);
}

#[test]
fn enhanced_decoder_gradients() {
    check(DecoderKind::Edd, Ablation::None);
}

#[test]
fn ablation_gradients() {
    for a in [Ablation::WoLeft, Ablation::Wo56, Ablation::WoG] {
        check(DecoderKind::Dd, a);
    }
}
