//! The layout-conditioned generator and the two-headed discriminator.

mod discriminator;
mod generator;

pub use discriminator::{
    assign_pyramid_level, discriminator_forward, DiscOutput, Discriminator, DiscriminatorConfig, PYRAMID_LEVELS,
};
pub use generator::{generator_forward, GenOptions, GenOutput, Generator, GeneratorConfig, Synthesis};

use crate::tensor::TensorError;

pub(crate) fn config_error(msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op: "config", msg: msg.into() }
}

pub(crate) fn stage_count(resolution: usize) -> Result<usize, TensorError> {
    if resolution < 16 || !resolution.is_power_of_two() {
        return Err(config_error(format!("resolution {resolution} must be a power of two >= 16")));
    }
    Ok(resolution.trailing_zeros() as usize - 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{sample_styles, LabeledBox, Layout, NormBox, PixelRect, StyleCodes};
    use crate::nn::Ctx;
    use crate::tensor::{grad_check_many, Element, Tape, Tensor};

    fn tiny_gen() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            channels: vec![4, 4, 3],
            d_img: 3,
            d_embed: 3,
            d_obj: 2,
            mask_size: 8,
            mask_channels: 2,
        }
    }

    fn tiny_disc() -> DiscriminatorConfig {
        DiscriminatorConfig { resolution: 16, channels: vec![3, 4, 4], obj_channels: 3, roi_size: 2 }
    }

    fn layout(boxes: &[(usize, [f64; 4])]) -> Layout {
        let boxes = boxes.iter().map(|&(l, b)| LabeledBox::new(l, NormBox::new(b[0], b[1], b[2], b[3]))).collect();
        Layout::new((32, 32), boxes).with_background().unwrap()
    }

    fn two_boxes() -> Layout {
        layout(&[(1, [0.1, 0.1, 0.6, 0.5]), (3, [0.4, 0.3, 0.95, 0.9])])
    }

    fn generate<T: Element>(
        g: &Generator<T>,
        layouts: &[Layout],
        styles: &[StyleCodes],
    ) -> (Tensor<T>, Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &g.params, false);
        let out = generator_forward(&ctx, &g.config, layouts, styles, &GenOptions::default()).unwrap();
        let maps = out.label_maps.iter().map(|m| m.shape()).collect();
        let masks = out.masks.iter().map(|m| m.shape()).collect::<Vec<_>>();
        assert_eq!(masks.len(), layouts.len());
        ((*out.image.value()).clone(), maps, masks)
    }

    #[test]
    fn generator_shapes_at_32() {
        let cfg = GeneratorConfig { channels: vec![8, 8, 6, 4], d_img: 8, d_embed: 8, d_obj: 8, ..Default::default() };
        let g = Generator::<f32>::new(cfg, 5, 1).unwrap();
        for m in [0, 1, 3] {
            let boxes: Vec<_> = (0..m).map(|i| (1 + i, [0.1 * i as f64, 0.2, 0.5 + 0.1 * i as f64, 0.9])).collect();
            let l = layout(&boxes);
            let st = sample_styles(&l, 8, 8, 9);
            let (img, maps, masks) = generate(&g, &[l], &[st]);
            assert_eq!(img.shape(), &[1, 3, 32, 32]);
            assert_eq!(maps, vec![vec![1, 5, 4, 4], vec![1, 5, 8, 8], vec![1, 5, 16, 16], vec![1, 5, 32, 32]]);
            assert_eq!(masks, vec![vec![m + 1, 32, 32]]);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generator_is_deterministic_and_style_sensitive() {
        let g = Generator::<f32>::new(tiny_gen(), 5, 2).unwrap();
        let l = two_boxes();
        let st = sample_styles(&l, 3, 2, 4);
        let (a, _, _) = generate(&g, &[l.clone()], &[st.clone()]);
        let (b, _, _) = generate(&g, &[l.clone()], &[st.clone()]);
        assert_eq!(a.data(), b.data());
        let mut other = st.clone();
        other.resample_image(12345);
        let (c, _, _) = generate(&g, &[l], &[other]);
        let l1: f64 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).abs() as f64).sum();
        assert!(l1 > 0.0);
    }

    #[test]
    fn label_maps_and_masks_stay_in_unit_interval() {
        let g = Generator::<f64>::new(tiny_gen(), 5, 3).unwrap();
        let l = two_boxes();
        let st = sample_styles(&l, 3, 2, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &g.params, false);
        let out = generator_forward(&ctx, &g.config, &[l.clone()], &[st], &GenOptions::default()).unwrap();
        for m in out.label_maps.iter().chain(&out.masks) {
            assert!(m.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let img = out.label_image(0);
        assert_eq!(img.len(), 16 * 16);
        assert!(img.iter().all(|l| [0, 1, 3].contains(l)));
    }

    #[test]
    fn generator_rejects_mismatched_inputs() {
        let g = Generator::<f32>::new(tiny_gen(), 5, 2).unwrap();
        let l = two_boxes();
        let st = sample_styles(&l, 3, 2, 4);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &g.params, false);
        let opts = GenOptions::default();
        let no_bg = Layout::new((32, 32), l.boxes[1..].to_vec());
        assert!(generator_forward(&ctx, &g.config, &[no_bg], &[st.clone()], &opts).is_err());
        let short = layout(&[(1, [0.1, 0.1, 0.6, 0.5])]);
        assert!(generator_forward(&ctx, &g.config, &[short], &[st], &opts).is_err());
        assert!(Generator::<f32>::new(GeneratorConfig { resolution: 24, ..tiny_gen() }, 5, 0).is_err());
        assert!(Generator::<f32>::new(GeneratorConfig { channels: vec![4, 4], ..tiny_gen() }, 5, 0).is_err());
    }

    #[test]
    fn pyramid_levels_are_monotone() {
        let full = PixelRect { r0: 0, c0: 0, r1: 32, c1: 32 };
        assert_eq!(assign_pyramid_level(&full, 32, 2), 1);
        let dot = PixelRect { r0: 3, c0: 3, r1: 4, c1: 4 };
        assert_eq!(assign_pyramid_level(&dot, 32, 2), 0);
        for side in 1..=8 {
            let small = PixelRect { r0: 0, c0: 0, r1: side, c1: side };
            let big = PixelRect { r0: 0, c0: 0, r1: 4 * side, c1: 4 * side };
            assert!(assign_pyramid_level(&big, 32, 2) >= assign_pyramid_level(&small, 32, 2));
        }
        assert_eq!(assign_pyramid_level(&full, 32, 1), 0);
    }

    fn images<T: Element>(n: usize, r: usize) -> Tensor<T> {
        Tensor::from_fn(&[n, 3, r, r], |i| T::of(((i * 37) % 19) as f64 / 9.5 - 1.0))
    }

    #[test]
    fn discriminator_scores_foreground_only() {
        let d = Discriminator::<f64>::new(tiny_disc(), 5, 4).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &d.params, false);
        let x = tape.constant(images(2, 16));
        let empty = layout(&[]);
        let out = discriminator_forward(&ctx, &d.config, &x, &[two_boxes(), empty.clone()]).unwrap();
        assert_eq!(out.p_img.shape(), vec![2]);
        assert_eq!(out.p_obj.unwrap().shape(), vec![2]);
        assert_eq!(out.obj_rows, vec![0..2, 2..2]);

        let x1 = tape.constant(images(1, 16));
        let out = discriminator_forward(&ctx, &d.config, &x1, &[empty]).unwrap();
        assert!(out.p_obj.is_none());
        assert_eq!(out.p_img.shape(), vec![1]);
        assert!(discriminator_forward(&ctx, &d.config, &x, &[two_boxes()]).is_err());
    }

    #[test]
    fn discriminator_is_deterministic() {
        let d = Discriminator::<f32>::new(tiny_disc(), 5, 4).unwrap();
        let run = || {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &d.params, false);
            let out = discriminator_forward(&ctx, &d.config, &tape.constant(images(1, 16)), &[two_boxes()]).unwrap();
            (out.p_img.value().data().to_vec(), out.object_scores(0))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn doubling_a_class_embedding_adds_the_projection_term() {
        let mut d = Discriminator::<f64>::new(tiny_disc(), 5, 6).unwrap();
        let l = two_boxes();
        let run = |d: &Discriminator<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &d.params, false);
            let x = tape.constant(images(1, 16));
            let out = discriminator_forward(&ctx, &d.config, &x, &[l.clone()]).unwrap();
            out.object_scores(0)
        };
        let before = run(&d);
        let c = d.config.obj_channels;
        let e = d.params.get("disc.obj.embed").unwrap().clone();
        let row: Vec<f64> = e.data()[3 * c..4 * c].to_vec();
        let e2 = Tensor::from_fn(e.shape(), |i| if i / c == 3 { 2.0 * e.data()[i] } else { e.data()[i] });
        d.params.insert("disc.obj.embed", e2);
        let after = run(&d);
        // Features of instance 1 (label 3) recovered from a second evaluation
        // with that row zeroed: p = fc(f) + e·f.
        let zeroed = Tensor::from_fn(e.shape(), |i| if i / c == 3 { 0.0 } else { e.data()[i] });
        d.params.insert("disc.obj.embed", zeroed);
        let base = run(&d);
        let proj = before[1] - base[1];
        assert!((after[1] - before[1] - proj).abs() < 1e-12);
        assert_eq!(after[0], before[0]);
        assert!(row.iter().any(|&v| v != 0.0) && proj.abs() > 0.0);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let g = Generator::<f64>::new(tiny_gen(), 5, 11).unwrap();
        let d = Discriminator::<f64>::new(tiny_disc(), 5, 12).unwrap();
        let mut g_params = g.params.clone();
        let mut d_params = d.params.clone();
        // Nonzero blend weights so both mask paths carry gradient.
        for name in g_params.names().filter(|n| n.ends_with(".alpha")).cloned().collect::<Vec<_>>() {
            g_params.insert(&name, Tensor::scalar(0.3).reshape(&[1]).unwrap());
        }
        // Zero-initialized biases put dead relu units exactly on the kink.
        for store in [&mut g_params, &mut d_params] {
            let biases: Vec<String> = store.names().filter(|n| n.ends_with(".b")).cloned().collect();
            for (k, name) in biases.iter().enumerate() {
                let t = store.get(name).unwrap();
                let t = Tensor::from_fn(t.shape(), |i| 0.05 * ((k * 31 + i * 7) as f64).sin());
                store.insert(name, t);
            }
        }
        g_params.refresh_spectral();
        d_params.refresh_spectral();
        let l = two_boxes();
        let st = sample_styles(&l, 3, 2, 8);
        let g_names: Vec<String> = g_params.names().cloned().collect();
        let d_names: Vec<String> = d_params.names().cloned().collect();
        let inputs: Vec<Tensor<f64>> = g_names
            .iter()
            .map(|n| g_params.get(n).unwrap().clone())
            .chain(d_names.iter().map(|n| d_params.get(n).unwrap().clone()))
            .collect();
        let report = grad_check_many(
            |tape, xs| {
                let gc = Ctx::new(tape, &g_params, false);
                let dc = Ctx::new(tape, &d_params, false);
                for (n, x) in g_names.iter().zip(xs) {
                    gc.bind(n, *x);
                }
                for (n, x) in d_names.iter().zip(&xs[g_names.len()..]) {
                    dc.bind(n, *x);
                }
                let out = generator_forward(&gc, &g.config, &[l.clone()], &[st.clone()], &GenOptions::default())?;
                let scores = discriminator_forward(&dc, &d.config, &out.image, &[l.clone()])?;
                scores.p_img.sum().add(&scores.p_obj.unwrap().sum())
            },
            &inputs,
            1e-6,
            Some(3),
        )
        .unwrap();
        let worst = report.worst.map(|(i, _)| g_names.iter().chain(&d_names).nth(i).cloned());
        assert!(report.max_rel_error < 1e-3, "{report:?} {worst:?}");
        assert!(report.checked > 100);
    }
}
