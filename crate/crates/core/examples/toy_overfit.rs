use std::time::Instant;

use modseg_core::backbone::BackboneConfig;
use modseg_core::data::{preprocess::preprocess, synth_case, Case, PreprocessSpec, SyntheticSpec};
use modseg_core::domain::Modality;
use modseg_core::eval::{evaluate, EvalConfig, WindowConfig};
use modseg_core::model::{ModelConfig, Segmenter};
use modseg_core::prompts::{build_embedding_table, HashEncoder, PromptTemplate};
use modseg_core::training::{AugmentConfig, TrainConfig, Trainer};

fn main() -> modseg_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(100, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(1e-3, |s| s.parse().unwrap());
    let spec = SyntheticSpec { num_classes: 2, n_ct: 4, n_mr: 4, test_per_modality: 0, ..Default::default() };
    let pre = PreprocessSpec { patch: 32, ..Default::default() };
    let cases = |m: Modality| -> modseg_core::Result<Vec<Case>> {
        (0..4)
            .map(|i| {
                let (v, mask, _) = synth_case(&spec, m, i, 7)?;
                Case::new(preprocess(&v, &pre)?, mask)
            })
            .collect()
    };
    let (ct, mr) = (cases(Modality::Ct)?, cases(Modality::Mr)?);
    let classes = spec.class_table()?;
    let table = build_embedding_table(&mut HashEncoder::new(512), PromptTemplate::V3, &classes)?;
    let model = Segmenter::<f32>::new(ModelConfig::text(BackboneConfig::toy(), 2, 512), 0)?;
    let cfg = TrainConfig {
        epochs,
        warmup_epochs: epochs / 20,
        lr,
        patch_size: 32,
        augment: AugmentConfig::default(),
        ..Default::default()
    };
    let mut tr = Trainer::new(cfg, model, Some(table.clone()), ct.clone(), mr.clone())?;
    let t0 = Instant::now();
    tr.fit(|t, _| {
        let s = t.history.last().unwrap();
        if s.epoch % 10 == 0 {
            println!("epoch {} loss {:.4} ct {:?} mr {:?} ({:.1}s)", s.epoch, s.mean_loss, s.ct, s.mr, t0.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    println!("train time {:.1}s", t0.elapsed().as_secs_f64());
    let ecfg = EvalConfig { window: WindowConfig { roi: 32, ..Default::default() }, ..Default::default() };
    let all: Vec<Case> = ct.into_iter().chain(mr).collect();
    let (report, _) = evaluate(&tr.model, &all, Some(&table), &ecfg)?;
    print!("{}", report.render_table());
    Ok(())
}
