// temporary probe: zero-shot accuracy vs pretrain epochs
use hicropl_core::encoders::{EncoderConfig, Vocab};
use hicropl_core::harness::dataset::{generate_dataset, DatasetSpec};
use hicropl_core::harness::{evaluate_zero_shot, pretrain_backbone};
use hicropl_core::objectives::builtin_templates;

fn main() {
    let cfg = EncoderConfig {
        layers: 2, heads: 2, d_t: 8, d_v: 8, d_joint: 8,
        vocab_size: 40, max_text_len: 8, image_size: 8, patch_size: 4,
        prompt_len: 2, channels: 3,
    };
    let spec = |seed| DatasetSpec {
        colors: vec!["red".into(), "green".into(), "blue".into()],
        shapes: vec!["square".into(), "circle".into()],
        image_size: 8, noise_std: 0.02, samples_per_class: 4, seed,
    };
    let train = generate_dataset(&spec(11)).unwrap();
    let eval = generate_dataset(&spec(12)).unwrap();
    let vocab = Vocab::builtin();
    let all_t: Vec<usize> = (0..train.samples.len()).collect();
    let all_e: Vec<usize> = (0..eval.samples.len()).collect();
    let classes: Vec<usize> = (0..eval.classes.len()).collect();
    let tpl = builtin_templates();
    for epochs in [12, 25, 40, 60, 90, 140] {
        let teacher = pretrain_backbone(&train, &vocab, &cfg, epochs, 9).unwrap();
        let acc_t = evaluate_zero_shot(&teacher, &vocab, &train, &all_t, &classes, &tpl).unwrap();
        let acc_e = evaluate_zero_shot(&teacher, &vocab, &eval, &all_e, &classes, &tpl).unwrap();
        println!("epochs={epochs:3} train_acc={acc_t:6.2} eval_acc={acc_e:6.2}");
    }
}
