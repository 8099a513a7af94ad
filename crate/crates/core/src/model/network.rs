use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::routing::{route, route_backward, RoutingDims, RoutingTrace};
use super::BackboneConfig;
use crate::data::{NoduleSample, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::ops::{
    conv2d_input_grad_acc, conv2d_into, conv2d_kernel_grad_acc, linear_backward_acc, linear_into, relu, sigmoid,
    softmax_backward_acc, softmax_into, squash_backward_acc, squash_into, ConvGeometry,
};
use crate::numerics::{ParamStore, Scalar, Tensor};

// Parameter ids, in registration order.
pub const STEM_W: usize = 0;
pub const STEM_B: usize = 1;
pub const PRIMARY_W: usize = 2;
pub const PRIMARY_B: usize = 3;
pub const ROUTING_W: usize = 4;
pub const TARGET_W: usize = 5;
pub const TARGET_B: usize = 6;
pub const ATTR_W: usize = 7;
pub const ATTR_B: usize = 8;
pub const DEC0_W: usize = 9;
pub const DEC0_B: usize = 10;
pub const DEC1_W: usize = 11;
pub const DEC1_B: usize = 12;
pub const DEC2_W: usize = 13;
pub const DEC2_B: usize = 14;

/// Initial attribute-head bias: middle of the 1..5 score scale.
const ATTR_BIAS_INIT: f64 = 3.0;

/// Per-sample network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleOutputs<T> {
    /// One vector per attribute capsule.
    pub attr_vectors: Vec<Tensor<T>>,
    /// Probability over malignancy scores 1..=5.
    pub malignancy_dist: Tensor<T>,
    /// Dense attribute-head predictions.
    pub attr_scores: Vec<T>,
    /// `[1, s, s]` sigmoid reconstruction of the mask.
    pub reconstruction: Tensor<T>,
}

impl<T: Scalar> CapsuleOutputs<T> {
    /// Capsule vectors concatenated in attribute order.
    pub fn latent(&self) -> Vec<T> {
        self.attr_vectors.iter().flat_map(|v| v.data().iter().copied()).collect()
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    image: Vec<T>,
    features: Vec<T>,
    poses_raw: Vec<T>,
    poses: Vec<T>,
    routing: RoutingTrace<T>,
    latent: Vec<T>,
    malignancy: Vec<T>,
    hidden0: Vec<T>,
    hidden1: Vec<T>,
    recon: Vec<T>,
}

/// Gradients of a scalar loss with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    /// `[A * dim]`, gradient on the capsule vectors from losses that use them
    /// directly (prototype losses).
    pub latent: Vec<T>,
    pub malignancy_dist: Vec<T>,
    pub attr_scores: Vec<T>,
    pub reconstruction: Vec<T>,
}

impl<T: Scalar> OutputGrads<T> {
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        Self {
            latent: vec![T::zero(); cfg.latent_width()],
            malignancy_dist: vec![T::zero(); cfg.malignancy_bins],
            attr_scores: vec![T::zero(); cfg.attr_caps],
            reconstruction: vec![T::zero(); cfg.image_len()],
        }
    }
}

/// Network input and reconstruction target at the profile's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> ModelInput<T> {
    /// Average-pools the stored 32x32 image down to `cfg.input_size`; the
    /// mask is pooled and thresholded at one half.
    pub fn from_sample(sample: &NoduleSample, cfg: &BackboneConfig) -> Self {
        let side = cfg.input_size;
        let f = IMAGE_SIZE / side;
        let pool = |src: &[f32], binarize: bool| -> Vec<T> {
            let mut out = vec![T::zero(); side * side];
            for y in 0..side {
                for x in 0..side {
                    let mut acc = 0.0f64;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += src[(y * f + dy) * IMAGE_SIZE + x * f + dx] as f64;
                        }
                    }
                    let m = acc / (f * f) as f64;
                    out[y * side + x] = T::of(if binarize { (m >= 0.5) as u8 as f64 } else { m });
                }
            }
            out
        };
        Self {
            image: Tensor::from_vec(&[1, side, side], pool(sample.image.data(), false)).expect("pooled plane"),
            mask: Tensor::from_vec(&[1, side, side], pool(sample.mask.data(), true)).expect("pooled plane"),
        }
    }
}

/// The capsule network with its three heads.
#[derive(Debug, Clone)]
pub struct ProtoCaps<T> {
    config: BackboneConfig,
    params: ParamStore<T>,
}

fn uniform_param<T: Scalar>(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(shape, -limit, limit, rng)
}

impl<T: Scalar> ProtoCaps<T> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let stem_fan = c.stem_k * c.stem_k;
        p.insert(
            "stem.weight",
            uniform_param(&[c.stem_kernels, 1, c.stem_k, c.stem_k], (6.0 / stem_fan as f64).sqrt(), &mut rng),
        )?;
        p.insert("stem.bias", Tensor::zeros(&[c.stem_kernels]))?;
        let prim_fan = c.stem_kernels * c.primary_k * c.primary_k;
        p.insert(
            "primary.weight",
            uniform_param(
                &[c.primary_channels(), c.stem_kernels, c.primary_k, c.primary_k],
                (3.0 / prim_fan as f64).sqrt(),
                &mut rng,
            ),
        )?;
        p.insert("primary.bias", Tensor::zeros(&[c.primary_channels()]))?;
        // scaled so that the initial routed totals have roughly unit norm
        let route_limit = 2.5 * c.attr_caps as f64 / ((c.n_in() * c.primary_pose_dim) as f64).sqrt();
        p.insert(
            "routing.weight",
            uniform_param(
                &[c.attr_caps, c.n_in(), c.attr_caps_dim, c.primary_pose_dim],
                route_limit,
                &mut rng,
            ),
        )?;
        let latent = c.latent_width();
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        p.insert(
            "target.weight",
            uniform_param(&[c.malignancy_bins, latent], xavier(latent, c.malignancy_bins), &mut rng),
        )?;
        p.insert("target.bias", Tensor::zeros(&[c.malignancy_bins]))?;
        p.insert(
            "attr.weight",
            uniform_param(&[c.attr_caps, c.attr_caps_dim], xavier(c.attr_caps_dim, 1), &mut rng),
        )?;
        p.insert("attr.bias", Tensor::full(&[c.attr_caps], T::of(ATTR_BIAS_INIT)))?;
        let [h0, h1] = c.decoder_hidden;
        let out = c.image_len();
        p.insert("decoder.0.weight", uniform_param(&[h0, latent], xavier(latent, h0), &mut rng))?;
        p.insert("decoder.0.bias", Tensor::zeros(&[h0]))?;
        p.insert("decoder.1.weight", uniform_param(&[h1, h0], xavier(h0, h1), &mut rng))?;
        p.insert("decoder.1.bias", Tensor::zeros(&[h1]))?;
        p.insert("decoder.2.weight", uniform_param(&[out, h1], xavier(h1, out), &mut rng))?;
        p.insert("decoder.2.bias", Tensor::zeros(&[out]))?;
        debug_assert_eq!(p.id("decoder.2.bias")?, DEC2_B);
        Ok(Self { config, params: p })
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_params(config: BackboneConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} network parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (id, (name, t)) in template.params.iter().enumerate() {
            let got = params.get(params.id(name)?);
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            if params.id(name)? != id {
                return Err(Error::Checkpoint(format!("`{name}` stored out of order")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn stem_geometry(&self) -> ConvGeometry {
        let c = &self.config;
        ConvGeometry {
            c_in: 1,
            height: c.input_size,
            width: c.input_size,
            c_out: c.stem_kernels,
            kernel: c.stem_k,
            stride: 1,
        }
    }

    fn primary_geometry(&self) -> ConvGeometry {
        let c = &self.config;
        ConvGeometry {
            c_in: c.stem_kernels,
            height: c.stem_out(),
            width: c.stem_out(),
            c_out: c.primary_channels(),
            kernel: c.primary_k,
            stride: c.primary_stride,
        }
    }

    fn routing_dims(&self) -> RoutingDims {
        RoutingDims {
            n_in: self.config.n_in(),
            pose_dim: self.config.primary_pose_dim,
            n_out: self.config.attr_caps,
            out_dim: self.config.attr_caps_dim,
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        if image.shape() != [1, s, s] {
            return Err(Error::shape(
                "forward",
                format!("image must be [1,{s},{s}], got {:?}", image.shape()),
            ));
        }
        Ok(())
    }

    fn stem_raw(&self, image: &[T]) -> Vec<T> {
        let g = self.stem_geometry();
        let mut out = vec![T::zero(); g.output_len()];
        conv2d_into(&g, image, self.params.get(STEM_W).data(), &mut out);
        let plane = g.out_height() * g.out_width();
        let bias = self.params.get(STEM_B).data();
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            for x in chunk {
                *x = relu(*x + bias[ch]);
            }
        }
        out
    }

    /// Stem convolution followed by ReLU: `[1,s,s] -> [K, s-k+1, s-k+1]`.
    pub fn forward_stem(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let n = self.config.stem_out();
        Tensor::from_vec(&[self.config.stem_kernels, n, n], self.stem_raw(image.data()))
    }

    /// `(pre-squash, squashed)` poses, each `[N_in * D]`.
    fn primary_raw(&self, features: &[T]) -> (Vec<T>, Vec<T>) {
        let c = &self.config;
        let g = self.primary_geometry();
        let mut conv = vec![T::zero(); g.output_len()];
        conv2d_into(&g, features, self.params.get(PRIMARY_W).data(), &mut conv);
        let grid = c.primary_grid();
        let plane = grid * grid;
        let bias = self.params.get(PRIMARY_B).data();
        let d = c.primary_pose_dim;
        let mut raw = vec![T::zero(); c.n_in() * d];
        for group in 0..c.primary_caps_types * c.primary_groups {
            for pos in 0..plane {
                let i = group * plane + pos;
                for k in 0..d {
                    let ch = group * d + k;
                    raw[i * d + k] = conv[ch * plane + pos] + bias[ch];
                }
            }
        }
        let mut poses = vec![T::zero(); raw.len()];
        for (src, dst) in raw.chunks(d).zip(poses.chunks_mut(d)) {
            squash_into(src, dst);
        }
        (raw, poses)
    }

    /// Primary capsules: stride-2 convolution whose channels are regrouped
    /// into squashed pose vectors, `[N_in, D]`. Pose `i` enumerates
    /// (capsule type, group, row, column) in that order.
    pub fn forward_primary_caps(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let n = c.stem_out();
        if features.shape() != [c.stem_kernels, n, n] {
            return Err(Error::shape(
                "forward_primary_caps",
                format!("features must be [{}, {n}, {n}], got {:?}", c.stem_kernels, features.shape()),
            ));
        }
        let (_, poses) = self.primary_raw(features.data());
        Tensor::from_vec(&[c.n_in(), c.primary_pose_dim], poses)
    }

    /// Routes primary poses to the attribute capsules.
    pub fn route(&self, poses: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        super::routing::routing(poses, self.params.get(ROUTING_W), self.config.routing_iters)
    }

    fn check_vectors(&self, attr_vectors: &[Tensor<T>]) -> Result<Vec<T>> {
        let c = &self.config;
        if attr_vectors.len() != c.attr_caps || attr_vectors.iter().any(|v| v.len() != c.attr_caps_dim) {
            return Err(Error::shape(
                "heads",
                format!("expected {} capsule vectors of dim {}", c.attr_caps, c.attr_caps_dim),
            ));
        }
        Ok(attr_vectors.iter().flat_map(|v| v.data().iter().copied()).collect())
    }

    fn target_raw(&self, latent: &[T]) -> Vec<T> {
        let mut logits = vec![T::zero(); self.config.malignancy_bins];
        linear_into(latent, self.params.get(TARGET_W).data(), self.params.get(TARGET_B).data(), &mut logits);
        let mut p = vec![T::zero(); logits.len()];
        softmax_into(&logits, &mut p);
        p
    }

    fn attr_raw(&self, latent: &[T]) -> Vec<T> {
        let dim = self.config.attr_caps_dim;
        let w = self.params.get(ATTR_W).data();
        let b = self.params.get(ATTR_B).data();
        latent
            .chunks(dim)
            .enumerate()
            .map(|(a, v)| b[a] + crate::numerics::dot(&w[a * dim..(a + 1) * dim], v))
            .collect()
    }

    fn decoder_raw(&self, latent: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let [h0, h1] = self.config.decoder_hidden;
        let p = &self.params;
        let mut a0 = vec![T::zero(); h0];
        linear_into(latent, p.get(DEC0_W).data(), p.get(DEC0_B).data(), &mut a0);
        a0.iter_mut().for_each(|x| *x = relu(*x));
        let mut a1 = vec![T::zero(); h1];
        linear_into(&a0, p.get(DEC1_W).data(), p.get(DEC1_B).data(), &mut a1);
        a1.iter_mut().for_each(|x| *x = relu(*x));
        let mut out = vec![T::zero(); self.config.image_len()];
        linear_into(&a1, p.get(DEC2_W).data(), p.get(DEC2_B).data(), &mut out);
        out.iter_mut().for_each(|x| *x = sigmoid(*x));
        (a0, a1, out)
    }

    /// Malignancy distribution from the concatenated capsule vectors.
    pub fn target_head(&self, attr_vectors: &[Tensor<T>]) -> Result<Tensor<T>> {
        let latent = self.check_vectors(attr_vectors)?;
        Ok(Tensor::vector(self.target_raw(&latent)))
    }

    /// One independent linear score per capsule.
    pub fn attr_head(&self, attr_vectors: &[Tensor<T>]) -> Result<Vec<T>> {
        let latent = self.check_vectors(attr_vectors)?;
        Ok(self.attr_raw(&latent))
    }

    /// Fully connected reconstruction of the mask, `[1, s, s]`.
    pub fn decoder(&self, attr_vectors: &[Tensor<T>]) -> Result<Tensor<T>> {
        let latent = self.check_vectors(attr_vectors)?;
        let s = self.config.input_size;
        Tensor::from_vec(&[1, s, s], self.decoder_raw(&latent).2)
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<(CapsuleOutputs<T>, ForwardCache<T>)> {
        self.check_image(image)?;
        let c = &self.config;
        let features = self.stem_raw(image.data());
        let (poses_raw, poses) = self.primary_raw(&features);
        let trace = route(
            self.routing_dims(),
            &poses,
            self.params.get(ROUTING_W).data(),
            c.routing_iters,
        );
        let latent = trace.final_output().to_vec();
        let malignancy = self.target_raw(&latent);
        let attr_scores = self.attr_raw(&latent);
        let (hidden0, hidden1, recon) = self.decoder_raw(&latent);
        let s = c.input_size;
        let outputs = CapsuleOutputs {
            attr_vectors: latent.chunks(c.attr_caps_dim).map(|v| Tensor::vector(v.to_vec())).collect(),
            malignancy_dist: Tensor::vector(malignancy.clone()),
            attr_scores,
            reconstruction: Tensor::from_vec(&[1, s, s], recon.clone())?,
        };
        let cache = ForwardCache {
            image: image.data().to_vec(),
            features,
            poses_raw,
            poses,
            routing: trace,
            latent,
            malignancy,
            hidden0,
            hidden1,
            recon,
        };
        Ok((outputs, cache))
    }

    /// Back-propagates `out` through the network, accumulating into `grads`
    /// (laid out as [`ParamStore::zero_grads`]).
    pub fn backward(&self, cache: &ForwardCache<T>, out: &OutputGrads<T>, grads: &mut [Vec<T>]) {
        let c = &self.config;
        let p = &self.params;
        let mut g_latent = out.latent.clone();

        // decoder
        let mut g_z = vec![T::zero(); cache.recon.len()];
        for ((g, &r), &go) in g_z.iter_mut().zip(&cache.recon).zip(&out.reconstruction) {
            *g = go * r * (T::one() - r);
        }
        let mut g_h1 = vec![T::zero(); cache.hidden1.len()];
        {
            let (gw, gb) = two_mut(grads, DEC2_W, DEC2_B);
            linear_backward_acc(&cache.hidden1, p.get(DEC2_W).data(), &g_z, Some(&mut g_h1), gw, gb);
        }
        relu_mask(&mut g_h1, &cache.hidden1);
        let mut g_h0 = vec![T::zero(); cache.hidden0.len()];
        {
            let (gw, gb) = two_mut(grads, DEC1_W, DEC1_B);
            linear_backward_acc(&cache.hidden0, p.get(DEC1_W).data(), &g_h1, Some(&mut g_h0), gw, gb);
        }
        relu_mask(&mut g_h0, &cache.hidden0);
        {
            let (gw, gb) = two_mut(grads, DEC0_W, DEC0_B);
            linear_backward_acc(&cache.latent, p.get(DEC0_W).data(), &g_h0, Some(&mut g_latent), gw, gb);
        }

        // attribute head
        let dim = c.attr_caps_dim;
        {
            let w = p.get(ATTR_W).data();
            let (gw, gb) = two_mut(grads, ATTR_W, ATTR_B);
            for (a, &g) in out.attr_scores.iter().enumerate() {
                gb[a] += g;
                for k in 0..dim {
                    gw[a * dim + k] += g * cache.latent[a * dim + k];
                    g_latent[a * dim + k] += g * w[a * dim + k];
                }
            }
        }

        // target head
        let mut g_logits = vec![T::zero(); c.malignancy_bins];
        softmax_backward_acc(&cache.malignancy, &out.malignancy_dist, &mut g_logits);
        {
            let (gw, gb) = two_mut(grads, TARGET_W, TARGET_B);
            linear_backward_acc(&cache.latent, p.get(TARGET_W).data(), &g_logits, Some(&mut g_latent), gw, gb);
        }

        // routing
        let mut g_poses = vec![T::zero(); cache.poses.len()];
        route_backward(
            self.routing_dims(),
            &cache.poses,
            p.get(ROUTING_W).data(),
            &cache.routing,
            &g_latent,
            &mut g_poses,
            &mut grads[ROUTING_W],
        );

        // primary capsules
        let d = c.primary_pose_dim;
        let mut g_raw = vec![T::zero(); g_poses.len()];
        for ((raw, gp), gr) in cache.poses_raw.chunks(d).zip(g_poses.chunks(d)).zip(g_raw.chunks_mut(d)) {
            squash_backward_acc(raw, gp, gr);
        }
        let grid = c.primary_grid();
        let plane = grid * grid;
        let pg = self.primary_geometry();
        let mut g_conv = vec![T::zero(); pg.output_len()];
        for group in 0..c.primary_caps_types * c.primary_groups {
            for pos in 0..plane {
                let i = group * plane + pos;
                for k in 0..d {
                    g_conv[(group * d + k) * plane + pos] = g_raw[i * d + k];
                }
            }
        }
        for (ch, chunk) in g_conv.chunks(plane).enumerate() {
            grads[PRIMARY_B][ch] += chunk.iter().copied().sum::<T>();
        }
        conv2d_kernel_grad_acc(&pg, &cache.features, &g_conv, &mut grads[PRIMARY_W]);
        let mut g_feat = vec![T::zero(); cache.features.len()];
        conv2d_input_grad_acc(&pg, p.get(PRIMARY_W).data(), &g_conv, &mut g_feat);
        relu_mask(&mut g_feat, &cache.features);

        // stem
        let sg = self.stem_geometry();
        let splane = sg.out_height() * sg.out_width();
        for (ch, chunk) in g_feat.chunks(splane).enumerate() {
            grads[STEM_B][ch] += chunk.iter().copied().sum::<T>();
        }
        conv2d_kernel_grad_acc(&sg, &cache.image, &g_feat, &mut grads[STEM_W]);
    }
}

fn relu_mask<T: Scalar>(grad: &mut [T], activ: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activ) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn two_mut<T>(grads: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a < b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::linear;
    use rand::Rng;

    fn zero_params(model: &mut ProtoCaps<f64>) {
        for id in 0..model.params.len() {
            let n = model.params.get(id).len();
            model.params.assign(id, &vec![0.0; n]).unwrap();
        }
    }

    #[test]
    fn stem_zero_image_zero_bias() {
        let m = ProtoCaps::<f32>::new(BackboneConfig::reduced(), 0).unwrap();
        let out = m.forward_stem(&Tensor::zeros(&[1, 16, 16])).unwrap();
        assert_eq!(out.shape(), &[64, 8, 8]);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stem_full_shape() {
        let m = ProtoCaps::<f32>::new(BackboneConfig::full(), 0).unwrap();
        let img = Tensor::full(&[1, 32, 32], 0.5);
        assert_eq!(m.forward_stem(&img).unwrap().shape(), &[256, 24, 24]);
        assert!(m.forward_stem(&Tensor::zeros(&[1, 16, 16])).is_err());
    }

    #[test]
    fn primary_caps_shapes_and_norms() {
        let m = ProtoCaps::<f32>::new(BackboneConfig::reduced(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let feat = m.forward_stem(&img).unwrap();
        let poses = m.forward_primary_caps(&feat).unwrap();
        assert_eq!(poses.shape(), &[288, 8]);
        for p in poses.data().chunks(8) {
            assert!(p.iter().map(|x| x * x).sum::<f32>().sqrt() < 1.0);
        }
        let zero = m.forward_primary_caps(&Tensor::zeros(&[64, 8, 8])).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn heads_on_zero_parameters() {
        let mut m = ProtoCaps::<f64>::new(BackboneConfig::reduced(), 2).unwrap();
        zero_params(&mut m);
        let vs: Vec<_> = (0..8).map(|_| Tensor::zeros(&[16])).collect();
        let p = m.target_head(&vs).unwrap();
        assert!(p.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let r = m.decoder(&vs).unwrap();
        assert_eq!(r.shape(), &[1, 16, 16]);
        assert!(r.data().iter().all(|&x| x == 0.5));
        m.params.assign(ATTR_B, &[3.0; 8]).unwrap();
        assert_eq!(m.attr_head(&vs).unwrap(), vec![3.0; 8]);
    }

    #[test]
    fn full_decoder_shape() {
        let m = ProtoCaps::<f32>::new(BackboneConfig::full(), 0).unwrap();
        let vs: Vec<_> = (0..8).map(|_| Tensor::full(&[16], 0.1)).collect();
        let r = m.decoder(&vs).unwrap();
        assert_eq!(r.shape(), &[1, 32, 32]);
        assert!(r.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn attr_head_is_per_capsule() {
        let m = ProtoCaps::<f64>::new(BackboneConfig::reduced(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<Tensor<f64>> = (0..8).map(|_| Tensor::uniform(&[16], -0.3, 0.3, &mut rng)).collect();
        let base = m.attr_head(&vs).unwrap();
        // composition oracle through numerics::linear
        for a in 0..8 {
            let w = Tensor::from_vec(&[1, 16], m.params.get(ATTR_W).data()[a * 16..(a + 1) * 16].to_vec()).unwrap();
            let b = Tensor::vector(vec![m.params.get(ATTR_B).data()[a]]);
            assert!((linear(&vs[a], &w, &b).unwrap().data()[0] - base[a]).abs() < 1e-12);
        }
        let mut moved = vs.clone();
        moved[5].data_mut()[0] += 0.7;
        let after = m.attr_head(&moved).unwrap();
        for a in 0..8 {
            assert_eq!(after[a] == base[a], a != 5);
        }
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let m = ProtoCaps::<f32>::new(BackboneConfig::reduced(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let (a, _) = m.forward(&img).unwrap();
        let (b, _) = m.forward(&img).unwrap();
        assert_eq!(a, b);
        assert!((a.malignancy_dist.data().iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert_eq!(a.attr_vectors.len(), 8);
        assert!(a.attr_vectors.iter().all(|v| v.len() == 16 && v.norm() < 1.0));
        // modest initial capsule lengths keep the squash out of saturation
        let norms: Vec<f32> = a.attr_vectors.iter().map(|v| v.norm()).collect();
        assert!(norms.iter().any(|&n| n > 0.05), "{norms:?}");
        let _ = rng.gen::<u8>();
    }

    fn probe_loss(m: &ProtoCaps<f64>, img: &Tensor<f64>, w: &OutputGrads<f64>) -> f64 {
        let (o, _) = m.forward(img).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&o.latent(), &w.latent)
            + dot(o.malignancy_dist.data(), &w.malignancy_dist)
            + dot(&o.attr_scores, &w.attr_scores)
            + dot(o.reconstruction.data(), &w.reconstruction)
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::numerics::{finite_diff_check_store, sample_coords};
        let mut m = ProtoCaps::<f64>::new(BackboneConfig::reduced(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let mut w = OutputGrads::<f64>::zeros(m.config());
        for v in [&mut w.latent, &mut w.malignancy_dist, &mut w.attr_scores, &mut w.reconstruction] {
            v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        let (_, cache) = m.forward(&img).unwrap();
        let mut grads = m.params.zero_grads();
        m.backward(&cache, &w, &mut grads);
        m.params.set_grads(grads).unwrap();
        let coords = sample_coords(&m.params, 60, &mut rng);
        let report = finite_diff_check_store(
            &mut m.params,
            &coords,
            |p| probe_loss(&ProtoCaps { config: BackboneConfig::reduced(), params: p.clone() }, &img, &w),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn model_input_pooling() {
        let s = &crate::data::synth_generate(1, 0)[0];
        let inp = ModelInput::<f32>::from_sample(s, &BackboneConfig::reduced());
        assert_eq!(inp.image.shape(), &[1, 16, 16]);
        let expect = (s.image.data()[0] + s.image.data()[1] + s.image.data()[32] + s.image.data()[33]) / 4.0;
        assert!((inp.image.data()[0] - expect).abs() < 1e-6);
        assert!(inp.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        let full = ModelInput::<f32>::from_sample(s, &BackboneConfig::full());
        assert_eq!(full.image.data(), s.image.data());
    }
}
