// Scratch: estimator error statistics over the recoverable gaze box.
use gazeswap::faces::GazeAngles;
use gazeswap::gaze::*;
use gazeswap::synth::*;

fn main() {
    let id = SyntheticIdentity {
        skin_color: [0.75, 0.65, 0.58],
        face_axes: (23.0, 27.0),
        eye_spacing: 19.0,
        eye_radius: 6.5,
        mouth: MouthParams { half_width: 8.0, half_height: 3.0 },
    };
    let pi = std::f64::consts::PI;
    let sixth = pi / 6.0;
    let tmpl = TemplateEstimator::default();
    let (mut cerrs, mut terrs, mut agree) = (Vec::new(), Vec::new(), Vec::new());
    let mut worst = (0.0f64, 0.0, 0.0);
    for i in 0..11 {
        for j in 0..11 {
            let mu = -sixth + 2.0 * sixth * i as f64 / 10.0;
            let phi = pi / 2.0 - sixth + 2.0 * sixth * j as f64 / 10.0;
            let gaze = GazeAngles::new(mu, phi).unwrap();
            for (seed, off) in [(17u64, (0.0, 0.0)), (91, (1.7, -2.3)), (5, (-2.9, 0.8))] {
                let s = render_face(&id, gaze, off, seed, 64).unwrap();
                let c = CentroidEstimator.estimate(&s.image, Some(&s.masks)).unwrap();
                let t = tmpl.estimate(&s.image, Some(&s.masks)).unwrap();
                let ce = angular_error(c, gaze);
                if ce > worst.0 { worst = (ce, mu, phi); }
                cerrs.push(ce);
                terrs.push(angular_error(t, gaze));
                agree.push(angular_error(c, t));
            }
        }
    }
    for (name, v) in [("centroid", &mut cerrs), ("template", &mut terrs), ("agreement", &mut agree)] {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("{name}: median {:.4} p90 {:.4} max {:.4}", v[v.len()/2], v[v.len()*9/10], v[v.len()-1]);
    }
    println!("worst centroid {:.4} at ({:+.3},{:.3}); grid spacing {:.4}", worst.0, worst.1, worst.2, tmpl.grid_spacing());
}
