use evoprompt_core::dataio::{gen_blobs, LabeledDataset};
use evoprompt_core::evaluation::accuracy;
use evoprompt_core::model::{BackboneKind, ModelInitSpec, PromptedClassifier};
use evoprompt_core::numcore::{
    finite_diff_gradient, max_relative_error, RandomStream,
};

fn main() {
    // shuffled labels case
    let m = PromptedClassifier::init(&ModelInitSpec {
        input_dim: 4,
        prompt_dim: 2,
        feature_dim: 4,
        num_classes: 4,
        backbone: BackboneKind::Linear,
        init_seed: 11,
        init_scale: 1.0,
        tau_logit: 0.5,
    })
    .unwrap();
    let mut s = RandomStream::new(12);
    let ds = gen_blobs(4, 100, 4, 5.0, 0.3, &mut s).unwrap();
    let mut labels: Vec<usize> = ds.labels().to_vec();
    for i in (1..labels.len()).rev() {
        let j = s.next_below((i + 1) as u64) as usize;
        labels.swap(i, j);
    }
    let shuffled = LabeledDataset::new(ds.inputs().to_vec(), labels, 4, "shuffled").unwrap();
    println!("shuffled acc = {}", accuracy(&m, &shuffled).unwrap());
    println!("orig acc = {}", accuracy(&m, &ds).unwrap());
    // prediction distribution
    let mut counts = [0usize; 4];
    for x in ds.inputs() {
        counts[evoprompt_core::evaluation::predict(&m, x).unwrap()] += 1;
    }
    println!("pred counts = {:?}", counts);

    // gradient case: replicate trial 1 of linear check
    let backbone = BackboneKind::Linear;
    let mut s = RandomStream::new(0xBEEF ^ backbone as u64);
    for trial in 0..3 {
        let ms = ModelInitSpec {
            input_dim: 3,
            prompt_dim: 4,
            feature_dim: 5,
            num_classes: 3,
            backbone,
            init_seed: s.next_u64(),
            init_scale: 1.0,
            tau_logit: 0.5,
        };
        let mut m = PromptedClassifier::init(&ms).unwrap();
        m.set_prompt(s.uniform_vector(4, -0.5, 0.5).unwrap()).unwrap();
        let x = s.uniform_vector(3, -1.0, 1.0).unwrap();
        let x_adv = x.add(&s.uniform_vector(3, -0.1, 0.1).unwrap());
        let y = (s.next_below(3)) as usize;
        let _ = y;
        let analytic = m.grad_prompt_kl(&x, &x_adv).unwrap();
        let fd = finite_diff_gradient(
            |p| m.with_prompt(p.clone())?.loss_kl(&x, &x_adv),
            m.prompt(),
            1e-6,
        )
        .unwrap();
        println!(
            "trial {trial} kl={:.6e} analytic={:?} fd={:?} rel={:.3e}",
            m.loss_kl(&x, &x_adv).unwrap(),
            analytic.as_slice(),
            fd.as_slice(),
            max_relative_error(&analytic, &fd)
        );
    }
}
