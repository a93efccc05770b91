use super::*;
use crate::degrade::{add_gaussian_noise, procedural_image, synth_blur, DatasetSpec, Pattern};
use crate::model::ModelConfig;
use proptest::prelude::{prop_assert, proptest, ProptestConfig};

fn scalar(g: &mut Graph<f64>, v: f64) -> Var {
    g.leaf(Tensor::scalar(v))
}

#[test]
fn l1_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.37).sin().abs()));
    let b = g.input(g.value(a).map(|v| v + 0.1));
    let z = l1_loss(&mut g, a, a).unwrap();
    assert_eq!(g.value(z).data()[0], 0.0);
    let ab = l1_loss(&mut g, a, b).unwrap();
    let ba = l1_loss(&mut g, b, a).unwrap();
    assert!((g.value(ab).data()[0] - 0.1).abs() < 1e-15);
    assert_eq!(g.value(ab).data()[0], g.value(ba).data()[0]);
}

#[test]
fn total_loss_examples() {
    let mut g = Graph::<f64>::new();
    let (l1, bal, zero) = (scalar(&mut g, 0.1), scalar(&mut g, 0.25), scalar(&mut g, 0.0));
    let t = total_loss(&mut g, l1, bal, 1e-4).unwrap();
    assert!((g.value(t).data()[0] - 0.100025).abs() < 1e-15);
    let t0 = total_loss(&mut g, l1, bal, 0.0).unwrap();
    assert_eq!(g.value(t0).data()[0], 0.1);
    let tb = total_loss(&mut g, l1, zero, 1e-4).unwrap();
    assert_eq!(g.value(tb).data()[0], 0.1);
    let grads = g.backward(t).unwrap();
    assert_eq!(grads.get(l1).unwrap().data()[0], 1.0);
    assert!((grads.get(bal).unwrap().data()[0] - 1e-4).abs() < 1e-18);
}

#[test]
fn cosine_endpoints() {
    assert!((cosine_lr(2e-4, 0, 500) - 2e-4).abs() <= 1e-12);
    assert!(cosine_lr(2e-4, 500, 500).abs() <= 1e-12);
    assert!((cosine_lr(2e-4, 250, 500) - 1e-4).abs() <= 1e-12);
    assert_eq!(cosine_lr(2e-4, 900, 500), cosine_lr(2e-4, 500, 500));
    assert_eq!(cosine_lr(2e-4, 3, 0), 2e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn cosine_is_nonincreasing(total in 1u64..10_000, t in 0u64..10_000) {
        let (a, b) = (cosine_lr(2e-4, t, total), cosine_lr(2e-4, t + 1, total));
        prop_assert!(b <= a);
        prop_assert!((0.0..=2e-4).contains(&a));
    }
}

fn store_with(values: &[f64]) -> (ParamStore<f64>, crate::numerics::ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("p", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
    s.add_buffer("buf", Tensor::full(&[2], 7.0)).unwrap();
    (s, id)
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let (mut s, id) = store_with(&[1.0, -2.0, 3.0]);
    let before = s.value(id).clone();
    let mut adam = Adam::new(&s);
    for _ in 0..3 {
        adam.step(&mut s, 1e-2);
    }
    assert_eq!(s.value(id), &before);
    assert_eq!(adam.t, 3);
}

#[test]
fn adam_matches_hand_steps() {
    let (mut s, id) = store_with(&[0.5, -1.0, 2.0]);
    let mut adam = Adam::new(&s);
    let gs = [[0.3, -2.0, 1e-3], [-0.1, 0.5, 4.0]];
    let lr = 0.01;
    let mut p = [0.5, -1.0, 2.0];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for (t, g) in gs.iter().enumerate() {
        s.grad_mut(id).data_mut().copy_from_slice(g);
        adam.step(&mut s, lr);
        let t = (t + 1) as i32;
        for j in 0..3 {
            m[j] = 0.9 * m[j] + 0.1 * g[j];
            v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.9f64.powi(t));
            let vh = v[j] / (1.0 - 0.999f64.powi(t));
            p[j] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        for j in 0..3 {
            assert!((s.value(id).data()[j] - p[j]).abs() < 1e-15);
        }
        if t == 1 {
            for j in 0..3 {
                let step = p[j] - [0.5, -1.0, 2.0][j];
                assert!((step + lr * g[j].signum()).abs() < 1e-7 * lr.max(1.0));
            }
        }
    }
    assert_eq!(s.by_name("buf").unwrap().data(), &[7.0, 7.0]);
}

#[test]
fn adam_step_reduces_a_quadratic() {
    let target = [0.3, -0.7, 1.1, 0.0];
    let (mut s, id) = store_with(&[1.0, 1.0, -1.0, 0.5]);
    let f = |s: &ParamStore<f64>| s.value(id).data().iter().zip(target).map(|(p, c)| (p - c).powi(2)).sum::<f64>();
    let mut adam = Adam::new(&s);
    let before = f(&s);
    let g: Vec<f64> = s.value(id).data().iter().zip(target).map(|(p, c)| 2.0 * (p - c)).collect();
    s.grad_mut(id).data_mut().copy_from_slice(&g);
    adam.step(&mut s, 0.05);
    assert!(f(&s) < before);
}

#[test]
fn clipping_caps_the_global_norm() {
    let (mut s, id) = store_with(&[0.0, 0.0]);
    s.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
    let (n, c) = clip_grad_norm(&mut s, 1.0);
    assert_eq!((n, c), (5.0, true));
    assert!((grad_norm(&s) - 1.0).abs() < 1e-15);
    assert!((s.grad(id).data()[0] - 0.6).abs() < 1e-15);
    let (n, c) = clip_grad_norm(&mut s, 2.0);
    assert!(!c && (n - 1.0).abs() < 1e-15);
}

#[test]
fn config_validation_and_epochs() {
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr0: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { clip_norm: Some(0.0), ..Default::default() }.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!((d.lr0, d.lambda, d.clip_norm), (2e-4, 1e-4, Some(1.0)));
    let e = TrainConfig { epochs: Some(3), batch_size: 4, ..Default::default() };
    assert_eq!(e.total_steps(10), 9);
    assert_eq!(TrainConfig { steps: 17, ..Default::default() }.total_steps(10), 17);
}

fn tiny_model<T: Scalar>() -> Model<T> {
    Model::new(ModelConfig { channels: 4, experts: 3, heads: 1, seed: 3, ..ModelConfig::tiny() }).unwrap()
}

fn noise_pairs<T: Scalar>(n: usize, size: usize) -> Vec<ImagePair<T>> {
    (0..n)
        .map(|i| {
            let clean = procedural_image::<T>(Pattern::ALL[i % 4], size, i as u64).unwrap();
            let degraded = add_gaussian_noise(&clean, 25.0, 100 + i as u64).unwrap();
            ImagePair { clean, degraded, task: Task::Noise }
        })
        .collect()
}

#[derive(Default)]
struct Record {
    rows: Vec<LogRow>,
    checkpoints: Vec<u64>,
}

impl Callbacks for Record {
    fn on_step(&mut self, row: &LogRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push(ckpt.step);
        Ok(())
    }
}

#[test]
fn zero_steps_yields_initial_checkpoint() {
    let model = tiny_model::<f32>();
    let initial = model.to_checkpoint(0);
    let cfg = TrainConfig { steps: 0, ..Default::default() };
    let mut rec = Record::default();
    let out = fit(model, &FixedPairs(noise_pairs(2, 8)), &[], &cfg, &mut rec).unwrap();
    assert!(out.log.is_empty() && rec.rows.is_empty());
    assert_eq!(rec.checkpoints, vec![0]);
    assert_eq!(out.checkpoint.step, 0);
    let params: Vec<_> = out.checkpoint.tensors_of(TensorKind::Param).cloned().collect();
    assert_eq!(params, initial.tensors_of(TensorKind::Param).cloned().collect::<Vec<_>>());
}

#[test]
fn fit_is_reproducible_and_logs_finite_values() {
    let run = || {
        let cfg = TrainConfig { steps: 4, batch_size: 2, seed: 9, checkpoint_every: 2, ..Default::default() };
        let mut rec = Record::default();
        let out = fit(tiny_model::<f64>(), &FixedPairs(noise_pairs(3, 8)), &[], &cfg, &mut rec).unwrap();
        (out.log, rec.checkpoints)
    };
    let (a, ck) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert_eq!(ck, vec![2, 4]);
    assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    for r in &a {
        assert!(r.l1.is_finite() && r.balance.is_finite() && r.total.is_finite());
        assert_eq!(r.total, r.l1 + 1e-4 * r.balance);
    }
    assert_eq!(a[0].lr, 2e-4);
    assert!(a[3].lr < a[1].lr);
}

#[test]
fn nan_loss_reports_the_step() {
    let mut trainer = Trainer::new(tiny_model::<f64>(), TrainConfig { steps: 5, ..Default::default() }).unwrap();
    let pairs = FixedPairs(noise_pairs(2, 8));
    trainer.run_until(&pairs, &[], 2, &mut ()).unwrap();
    let id = trainer.model.store.id("enc.conv.w").unwrap();
    trainer.model.store.value_mut(id).data_mut()[0] = f64::NAN;
    match trainer.run(&pairs, &[], &mut ()) {
        Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 2),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn resume_continues_bit_identically() {
    let pairs = FixedPairs(noise_pairs(4, 8));
    let cfg = TrainConfig { steps: 6, batch_size: 2, seed: 4, ..Default::default() };
    let mut straight = Trainer::new(tiny_model::<f32>(), cfg.clone()).unwrap();
    let full = straight.run(&pairs, &[], &mut ()).unwrap();

    let mut first = Trainer::new(tiny_model::<f32>(), cfg.clone()).unwrap();
    first.run_until(&pairs, &[], 3, &mut ()).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::<f32>::resume(&Checkpoint::from_bytes(&bytes).unwrap(), cfg).unwrap();
    let rest = resumed.run(&pairs, &[], &mut ()).unwrap();
    assert_eq!(&full[3..], &rest[..]);
    assert_eq!(straight.checkpoint(), resumed.checkpoint());
}

#[test]
fn resume_requires_optimizer_state() {
    let model = tiny_model::<f32>();
    let ckpt = model.to_checkpoint(0);
    assert!(matches!(Trainer::<f32>::resume(&ckpt, TrainConfig::default()), Err(Error::Corrupt(_))));
}

fn identity_model() -> Model<f64> {
    let mut m = tiny_model::<f64>();
    let (w, b) = m.decoder_output_params();
    for id in [w, b] {
        let z = Tensor::zeros(m.store.value(id).shape());
        m.store.set(id, z).unwrap();
    }
    m
}

#[test]
fn identity_model_evaluates_to_input_metrics() {
    let spec = DatasetSpec { procedural: 4, image_size: 16, crop: 16, tasks: vec![Task::Noise, Task::Blur], noise_sigmas: vec![25.0], ..DatasetSpec::default() };
    let ds = Dataset::<f64>::new(spec).unwrap();
    let pairs = ds.eval_pairs(2).unwrap();
    let m = evaluate(&identity_model(), &pairs).unwrap();
    assert_eq!(m.iter().map(|r| r.task).collect::<Vec<_>>(), vec![Task::Noise, Task::Blur]);
    for r in &m {
        let own: Vec<_> = pairs.iter().filter(|p| p.task == r.task).collect();
        let direct = own.iter().map(|p| psnr(&p.degraded, &p.clean).unwrap()).sum::<f64>() / own.len() as f64;
        assert_eq!(r.count, 2);
        assert!((r.psnr - direct).abs() < 1e-9);
        assert_eq!(r.psnr, r.input_psnr);
        assert_eq!(r.ssim, r.input_ssim);
        assert!(r.ssim.is_some());
    }
    assert!(matches!(evaluate(&identity_model(), &[]), Err(Error::Data(_))));
}

#[test]
fn periodic_eval_fills_rows_and_csv() {
    let pairs = noise_pairs::<f64>(2, 12);
    let mut eval = pairs.clone();
    eval[1].task = Task::Blur;
    eval[1].degraded = synth_blur(&eval[1].clean, 1.0, 0).unwrap();
    let cfg = TrainConfig { steps: 3, batch_size: 2, eval_every: 2, ..Default::default() };
    let out = fit(tiny_model::<f64>(), &FixedPairs(pairs), &eval, &cfg, &mut ()).unwrap();
    let with_eval: Vec<u64> = out.log.iter().filter(|r| !r.eval.is_empty()).map(|r| r.step).collect();
    assert_eq!(with_eval, vec![1, 2]);
    let tasks = [Task::Noise, Task::Blur];
    assert_eq!(LogRow::csv_header(&tasks), "step,lr,l1,balance,total,grad_norm,clipped,noise_psnr,noise_ssim,blur_psnr,blur_ssim");
    let line = out.log[0].csv_line(&tasks);
    assert!(line.ends_with(",,,,"), "{line}");
    let line = out.log[1].csv_line(&tasks);
    assert_eq!(line.split(',').count(), 11);
    assert!(line.split(',').skip(7).all(|f| f.parse::<f64>().is_ok()));
}

#[test]
fn output_dir_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut out = OutputDir::create(dir.path(), &[Task::Noise]).unwrap();
    let cfg = TrainConfig { steps: 2, batch_size: 1, checkpoint_every: 1, ..Default::default() };
    fit(tiny_model::<f32>(), &FixedPairs(noise_pairs(2, 8)), &[], &cfg, &mut out).unwrap();
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for s in [1, 2] {
        let c = Checkpoint::load(dir.path().join(format!("step_{s}.meas"))).unwrap();
        assert_eq!(c.step, s);
        assert_eq!(c.optimizer_t, Some(s));
    }
    assert_eq!(out.last_checkpoint.unwrap(), dir.path().join("step_2.meas"));
}

#[test]
fn fixed_pairs_batches() {
    let pairs = FixedPairs(noise_pairs::<f64>(4, 6));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(pairs.batch(&mut rng, 4).unwrap(), pairs.0);
    let sub = pairs.batch(&mut rng, 2).unwrap();
    assert_eq!(sub.len(), 2);
    assert_ne!(sub[0], sub[1]);
    assert!(FixedPairs::<f64>(vec![]).batch(&mut rng, 1).is_err());
}

#[test]
fn dataset_batches_follow_the_rng() {
    let ds = Dataset::<f64>::new(DatasetSpec { procedural: 4, image_size: 10, crop: 8, ..DatasetSpec::default() }).unwrap();
    let a = PairSource::batch(&ds, &mut ChaCha8Rng::seed_from_u64(1), 3).unwrap();
    let b = PairSource::batch(&ds, &mut ChaCha8Rng::seed_from_u64(1), 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
}

#[test]
fn spectrum_without_decomposition_has_no_high_energy() {
    let cfg = ModelConfig { channels: 4, experts: 3, heads: 1, use_fd: false, ..ModelConfig::tiny() };
    let m = Model::<f64>::new(cfg).unwrap();
    let rows = spectrum_report(&m, &noise_pairs(2, 6)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].high_energy, 0.0);
    assert!(rows[0].low_energy > 0.0);
    let with_fd = spectrum_report(&tiny_model::<f64>(), &noise_pairs(2, 6)).unwrap();
    assert!(with_fd[0].high_energy > 0.0);
    let mut csv = Vec::new();
    write_spectrum_csv(&with_fd, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("task,count,low_energy,high_energy\nnoise,2,"));
}

#[test]
fn thread_count_parsing() {
    assert_eq!(parse_threads(None).unwrap(), None);
    assert_eq!(parse_threads(Some("3")).unwrap(), Some(3));
    assert!(parse_threads(Some("0")).is_err());
    assert!(parse_threads(Some("many")).is_err());
}
