use dyngs::gaussian::GaussianSet;
use dyngs::io::{load_dataset, save_dataset};
use dyngs::metrics::{psnr, PSNR_CAP};
use dyngs::render::{render, RenderConfig};
use dyngs::synth::{generate, standard_scene};

#[test]
fn stored_frames_match_ground_truth_renders() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&generate(&standard_scene()).unwrap(), dir.path()).unwrap();
    let set = load_dataset(dir.path()).unwrap();
    let gt = set.ground_truth.as_ref().expect("generated datasets carry ground truth");
    assert_eq!(set.frames(), 20);
    for (f, &t) in set.timestamps.iter().enumerate() {
        let state = gt.state_at(t).unwrap();
        for (k, cam) in set.cameras.iter().enumerate() {
            let img = render(&state, cam, &RenderConfig::default()).unwrap();
            let p = psnr(&img.colors, &set.image(f, k).to_scalars()).unwrap();
            assert_eq!(p, PSNR_CAP, "frame {f} camera {k}");
        }
    }
}

/// Center of the pixels brighter than half the peak, weighted by brightness.
fn half_max_centroid(colors: &[f64], w: usize, h: usize) -> Option<[f64; 2]> {
    let lum: Vec<f64> = colors.chunks(3).map(|c| c.iter().sum()).collect();
    let peak = lum.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return None;
    }
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = lum[y * w + x];
            let on_border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            if on_border && v > 0.01 * peak {
                return None;
            }
            if v >= 0.5 * peak {
                sx += v * x as f64;
                sy += v * y as f64;
                sw += v;
            }
        }
    }
    Some([sx / sw, sy / sw])
}

#[test]
fn projected_centers_land_on_rendered_peaks() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&generate(&standard_scene()).unwrap(), dir.path()).unwrap();
    let set = load_dataset(dir.path()).unwrap();
    let gt = set.ground_truth.unwrap();
    let mut checked = 0;
    for &t in &[set.timestamps[0], set.timestamps[10]] {
        let state = gt.state_at(t).unwrap();
        for i in 0..state.len() {
            if state.opacity(i) < 0.1 {
                continue;
            }
            let alone = GaussianSet::from_gaussians(&[state.gaussian(i)]).unwrap();
            for cam in &set.cameras {
                let img = render(&alone, cam, &RenderConfig::default()).unwrap();
                let Some(c) = half_max_centroid(&img.colors, cam.width, cam.height) else {
                    continue;
                };
                let p = cam.project_point(state.position(i)).unwrap();
                let d = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)).sqrt();
                assert!(d <= 0.5, "Gaussian {i} at t={t}: projected {p:?}, peak {c:?}");
                checked += 1;
            }
        }
    }
    assert!(checked > 50, "only {checked} isolated Gaussians checked");
}
