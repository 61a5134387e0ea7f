//! Phase-level timing of one discriminator + generator step.

use icegan_core::config::RunConfig;
use icegan_core::data::generate_toy_corpus;
use icegan_core::generator::one_hot_rows;
use icegan_core::loss;
use icegan_core::nn::ForwardCtx;
use icegan_core::tensor::Tensor;
use icegan_core::train::build_models;
use std::time::Instant;

fn main() {
    icegan_core::tune_allocator();
    let cfg = RunConfig::default();
    let corpus = generate_toy_corpus(20, 9, cfg.corpus_seed()).expect("corpus");
    let mut models = build_models(&cfg);
    let b = 16;
    let n = 128 * 128;
    let mut onset = vec![0.0; b * n];
    let mut apex = vec![0.0; b * n];
    let mut classes = Vec::new();
    for i in 0..b {
        onset[i * n..(i + 1) * n].copy_from_slice(&corpus[i].onset.data);
        apex[i * n..(i + 1) * n].copy_from_slice(&corpus[i].apex.data);
        classes.push(corpus[i].class.index());
    }
    let onset = Tensor::new(vec![b, 1, 128, 128], onset).unwrap();
    let apex = Tensor::new(vec![b, 1, 128, 128], apex).unwrap();
    let one_hot = one_hot_rows(&classes, 3).unwrap();
    let z = Tensor::new(vec![b, 100], vec![0.1; b * 100]).unwrap();
    let weights = cfg.loss;

    for round in 0..2 {
        println!("--- round {round} ---");
        // D step phases
        let t0 = Instant::now();
        let mut ctx = ForwardCtx::new(false);
        let x_on = ctx.tape.leaf(&onset);
        let gen = models.generator.as_ref().unwrap();
        let x_syn = gen.forward_train(&mut ctx, &models.registry, x_on, &z, &one_hot, None).unwrap();
        println!("G fwd (nograd): {:.2}s", t0.elapsed().as_secs_f64());

        let t = Instant::now();
        ctx.trainable = true;
        let x_real = ctx.tape.leaf(&apex);
        let disc = &models.discriminator;
        let out_real = disc.discriminate(&mut ctx, &models.registry, x_real).unwrap();
        println!("D fwd real: {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let poses = out_real.exp_poses.unwrap();
        let recon = disc.reconstruct(&mut ctx, &models.registry, poses, &classes).unwrap();
        let shifted = ctx.tape.add_scalar(x_real, 1.0);
        let target01 = ctx.tape.scale(shifted, 0.5);
        let rec = loss::l_mse(&mut ctx.tape, recon, target01).unwrap();
        let margin = loss::l_margin(&mut ctx.tape, out_real.exp_lengths, &classes, &weights).unwrap();
        let rec_s = ctx.tape.scale(rec, weights.beta);
        let cls = ctx.tape.add(margin, rec_s).unwrap();
        println!("recon+losses real: {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let out_fake = disc.discriminate(&mut ctx, &models.registry, x_syn).unwrap();
        println!("D fwd fake: {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let (d_term, _) = loss::l_gan(&mut ctx.tape, out_real.adv_len, out_fake.adv_len).unwrap();
        let adv_s = ctx.tape.scale(d_term, weights.lambda_adv);
        let cls_s = ctx.tape.scale(cls, weights.lambda_mer);
        let total = ctx.tape.add(cls_s, adv_s).unwrap();
        println!("loss assembly: {:.3}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        ctx.tape.backward(total).unwrap();
        println!("D backward: {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        ctx.apply_grads(&mut models.registry).unwrap();
        models.registry.adam_step_prefix("disc.", 1e-3).unwrap();
        models.registry.zero_grads();
        println!("apply+adam: {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        drop(ctx);
        println!("tape drop: {:.2}s", t.elapsed().as_secs_f64());

        // G step phases
        let t = Instant::now();
        let mut ctx = ForwardCtx::new(true);
        let x_on = ctx.tape.leaf(&onset);
        let gen = models.generator.as_ref().unwrap();
        let x_syn = gen.forward_train(&mut ctx, &models.registry, x_on, &z, &one_hot, None).unwrap();
        println!("G fwd (grad): {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        ctx.trainable = false;
        let out_fake = disc.discriminate(&mut ctx, &models.registry, x_syn).unwrap();
        println!("D fwd (frozen): {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let g_term = loss::gan_log_prob(&mut ctx.tape, out_fake.adv_len, false).unwrap();
        let target = ctx.tape.leaf(&apex);
        let pix = loss::l_pixel(&mut ctx.tape, x_syn, target).unwrap();
        let per = models.perceptual.loss(&mut ctx.tape, x_on, x_syn).unwrap();
        let per_s = ctx.tape.scale(per, weights.alpha);
        let ip = ctx.tape.add(pix, per_s).unwrap();
        let ip_s = ctx.tape.scale(ip, weights.lambda_mes);
        let adv_s = ctx.tape.scale(g_term, weights.lambda_adv);
        let total = ctx.tape.add(ip_s, adv_s).unwrap();
        println!("G losses: {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        ctx.tape.backward(total).unwrap();
        println!("G backward: {:.2}s", t.elapsed().as_secs_f64());

        let t = Instant::now();
        ctx.apply_grads(&mut models.registry).unwrap();
        models.registry.adam_step_prefix("gen.", 1e-3).unwrap();
        models.registry.zero_grads();
        drop(ctx);
        println!("G apply+adam+drop: {:.2}s", t.elapsed().as_secs_f64());
        println!("ROUND TOTAL: {:.2}s", t0.elapsed().as_secs_f64());
    }
}
