//! Point-set observation encoder.
//!
//! Per frame: a shared per-point MLP lifts each workspace point, a max-pool
//! over the point axis collapses the set (order-invariant by construction),
//! the pooled feature is concatenated with the proprioceptive state, and a
//! final linear layer produces the per-frame code. Codes are concatenated
//! across the observation window.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use super::{ModelConfig, ObsWindow};

#[derive(Debug, Clone)]
pub struct Encoder {
    point1: super::Linear,
    point2: super::Linear,
    out: super::Linear,
    k: usize,
    point_dim: usize,
    proprio_dim: usize,
    hidden: usize,
    n_obs: usize,
    pub cond_dim: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let point1 = super::Linear::new(
            store,
            &format!("{name}.point1"),
            cfg.point_dim,
            cfg.enc_hidden,
            rng,
        )?;
        let point2 = super::Linear::new(
            store,
            &format!("{name}.point2"),
            cfg.enc_hidden,
            cfg.enc_hidden,
            rng,
        )?;
        let out = super::Linear::new(
            store,
            &format!("{name}.out"),
            cfg.enc_hidden + cfg.proprio_dim,
            cfg.cond_dim,
            rng,
        )?;
        Ok(Encoder {
            point1,
            point2,
            out,
            k: cfg.k_points,
            point_dim: cfg.point_dim,
            proprio_dim: cfg.proprio_dim,
            hidden: cfg.enc_hidden,
            n_obs: cfg.n_obs,
            cond_dim: cfg.cond_dim,
        })
    }

    fn validate_window(&self, w: &ObsWindow) -> Result<()> {
        if w.len() != self.n_obs {
            return Err(CoreError::invalid(
                "encode_obs",
                format!("window length {} != n_obs {}", w.len(), self.n_obs),
            ));
        }
        for obs in w {
            if obs.points.shape() != [self.k, self.point_dim] {
                return Err(CoreError::invalid(
                    "encode_obs",
                    format!(
                        "points shape {:?}, expected [{}, {}]",
                        obs.points.shape(),
                        self.k,
                        self.point_dim
                    ),
                ));
            }
            if obs.proprio.shape() != [self.proprio_dim] {
                return Err(CoreError::invalid(
                    "encode_obs",
                    format!(
                        "proprio shape {:?}, expected [{}]",
                        obs.proprio.shape(),
                        self.proprio_dim
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Encode a batch of observation windows into `[B, n_obs * cond_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        windows: &[ObsWindow],
    ) -> Result<VarId> {
        if windows.is_empty() {
            return Err(CoreError::invalid("encode_obs", "empty batch"));
        }
        for w in windows {
            self.validate_window(w)?;
        }
        let b = windows.len();
        let frames = b * self.n_obs;

        let mut pts = Tensor::zeros([frames * self.k, self.point_dim]);
        let mut prop = Tensor::zeros([frames, self.proprio_dim]);
        for (wi, w) in windows.iter().enumerate() {
            for (fi, obs) in w.iter().enumerate() {
                let f = wi * self.n_obs + fi;
                let dst = &mut pts.data_mut()
                    [f * self.k * self.point_dim..(f + 1) * self.k * self.point_dim];
                dst.copy_from_slice(obs.points.data());
                prop.data_mut()[f * self.proprio_dim..(f + 1) * self.proprio_dim]
                    .copy_from_slice(obs.proprio.data());
            }
        }

        let p = tape.constant(pts)?;
        let h = self.point1.forward(tape, store, p)?;
        let h = tape.mish(h)?;
        let h = self.point2.forward(tape, store, h)?;
        let h = tape.mish(h)?;
        let per_frame = tape.reshape(h, [frames, self.k, self.hidden])?;
        let pooled = tape.max_axis(per_frame, 1)?;

        let pr = tape.constant(prop)?;
        let cat = tape.concat(&[pooled, pr], 1)?;
        let code = self.out.forward(tape, store, cat)?;
        tape.reshape(code, [b, self.n_obs * self.cond_dim])
    }

    /// Encode one window into a flat condition vector.
    pub fn encode(&self, store: &ParamStore, window: &ObsWindow) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, core::slice::from_ref(window))?;
        tape.value(v).reshape([self.n_obs * self.cond_dim])
    }

    /// Scalar-loop reference implementation of [`Encoder::encode`], used as
    /// an independent oracle in tests.
    #[doc(hidden)]
    pub fn encode_reference(&self, store: &ParamStore, window: &ObsWindow) -> Result<Tensor> {
        self.validate_window(window)?;
        let w1 = store.value(store.index_of("enc.point1.weight").unwrap());
        let b1 = store.value(store.index_of("enc.point1.bias").unwrap());
        let w2 = store.value(store.index_of("enc.point2.weight").unwrap());
        let b2 = store.value(store.index_of("enc.point2.bias").unwrap());
        let w3 = store.value(store.index_of("enc.out.weight").unwrap());
        let b3 = store.value(store.index_of("enc.out.bias").unwrap());
        let h = self.hidden;

        let mut out = Vec::with_capacity(self.n_obs * self.cond_dim);
        for obs in window {
            let mut pooled = alloc::vec![f64::NEG_INFINITY; h];
            for ki in 0..self.k {
                let pt = &obs.points.data()[ki * self.point_dim..(ki + 1) * self.point_dim];
                let mut h1 = alloc::vec![0.0; h];
                for (j, h1j) in h1.iter_mut().enumerate() {
                    let mut acc = b1.data()[j];
                    for (i, &p) in pt.iter().enumerate() {
                        acc += p * w1.data()[i * h + j];
                    }
                    *h1j = crate::math::mish(acc);
                }
                for (j, pj) in pooled.iter_mut().enumerate() {
                    let mut acc = b2.data()[j];
                    for (i, &v) in h1.iter().enumerate() {
                        acc += v * w2.data()[i * h + j];
                    }
                    let v = crate::math::mish(acc);
                    if v > *pj {
                        *pj = v;
                    }
                }
            }
            for j in 0..self.cond_dim {
                let mut acc = b3.data()[j];
                for (i, &v) in pooled.iter().enumerate() {
                    acc += v * w3.data()[i * self.cond_dim + j];
                }
                for (i, &v) in obs.proprio.data().iter().enumerate() {
                    acc += v * w3.data()[(h + i) * self.cond_dim + j];
                }
                out.push(acc);
            }
        }
        Tensor::new([self.n_obs * self.cond_dim], out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::Observation;
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            k_points: 5,
            cond_dim: 4,
            enc_hidden: 6,
            n_obs: 2,
            ..Default::default()
        }
    }

    fn setup() -> (ParamStore, Encoder, ModelConfig) {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(31, "init", 0);
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
        (store, enc, cfg)
    }

    fn random_window(cfg: &ModelConfig, rng: &mut Rng) -> ObsWindow {
        (0..cfg.n_obs)
            .map(|_| Observation {
                points: Tensor::randn([cfg.k_points, cfg.point_dim], rng),
                proprio: Tensor::randn([cfg.proprio_dim], rng),
            })
            .collect()
    }

    #[test]
    fn permuting_points_leaves_code_unchanged() {
        let (store, enc, cfg) = setup();
        let mut rng = Rng::from_seed(7);
        let window = random_window(&cfg, &mut rng);
        let base = enc.encode(&store, &window).unwrap();

        let mut permuted = window.clone();
        for obs in &mut permuted {
            let k = cfg.k_points;
            let d = cfg.point_dim;
            let mut rows: Vec<Vec<f64>> = (0..k)
                .map(|i| obs.points.data()[i * d..(i + 1) * d].to_vec())
                .collect();
            rows.reverse();
            rows.swap(0, 2);
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            obs.points = Tensor::new([k, d], flat).unwrap();
        }
        let out = enc.encode(&store, &permuted).unwrap();
        assert_eq!(base.data(), out.data());
    }

    #[test]
    fn duplicating_points_leaves_code_unchanged() {
        // max over the point axis is idempotent under duplication; build a
        // window whose point set is [p0, p0, p1, p1, p2] vs [p0, p1, p2, p2, p0]
        let (store, enc, cfg) = setup();
        let mut rng = Rng::from_seed(8);
        let p: Vec<f64> = (0..3 * cfg.point_dim).map(|_| rng.normal()).collect();
        let mk = |idx: &[usize]| -> ObsWindow {
            (0..cfg.n_obs)
                .map(|f| {
                    let mut flat = Vec::new();
                    for &i in idx {
                        flat.extend_from_slice(&p[i * cfg.point_dim..(i + 1) * cfg.point_dim]);
                    }
                    Observation {
                        points: Tensor::new([cfg.k_points, cfg.point_dim], flat).unwrap(),
                        proprio: Tensor::full([cfg.proprio_dim], 0.1 * f as f64),
                    }
                })
                .collect()
        };
        let a = enc.encode(&store, &mk(&[0, 0, 1, 1, 2])).unwrap();
        let b = enc.encode(&store, &mk(&[0, 1, 2, 2, 0])).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn vectorized_matches_reference_loop() {
        let (store, enc, cfg) = setup();
        let mut rng = Rng::from_seed(9);
        for _ in 0..5 {
            let window = random_window(&cfg, &mut rng);
            let fast = enc.encode(&store, &window).unwrap();
            let slow = enc.encode_reference(&store, &window).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn wrong_window_length_rejected() {
        let (store, enc, cfg) = setup();
        let mut rng = Rng::from_seed(10);
        let mut window = random_window(&cfg, &mut rng);
        window.pop();
        assert!(enc.encode(&store, &window).is_err());
    }

    #[test]
    fn wrong_point_count_rejected() {
        let (store, enc, cfg) = setup();
        let mut rng = Rng::from_seed(11);
        let mut window = random_window(&cfg, &mut rng);
        window[0].points = Tensor::randn([cfg.k_points + 1, cfg.point_dim], &mut rng);
        assert!(enc.encode(&store, &window).is_err());
    }
}
